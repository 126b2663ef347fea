//! Browser bindings for the detector. Three operations are exposed:
//! explaining a caption sequence with a model trained in the page on a
//! synthetic corpus, computing ranking metrics for pasted scores, and
//! comparing two texts in the hashed embedding space.
//!
//! The logic lives in [`demo`] as plain Rust so it can be tested natively;
//! the `wasm_bindgen` wrappers only convert errors.

use wasm_bindgen::prelude::*;

pub mod demo;

/// Detector trained on a synthetic corpus when constructed.
#[wasm_bindgen]
pub struct Detector {
    inner: demo::DemoDetector,
}

#[wasm_bindgen]
impl Detector {
    /// Trains on a small synthetic corpus; takes a few seconds.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Detector, JsError> {
        let inner = demo::DemoDetector::train(u64::from(seed)).map_err(|e| JsError::new(&e))?;
        Ok(Detector { inner })
    }

    /// Explanation record (JSON) for captions given one per line.
    pub fn explain(&self, captions: &str, top_k: usize, counterfactual: bool) -> Result<String, JsError> {
        self.inner
            .explain(captions, top_k, counterfactual)
            .map_err(|e| JsError::new(&e))
    }

    /// Held-out AUC of the trained model.
    #[wasm_bindgen(getter)]
    pub fn held_out_auc(&self) -> f64 {
        self.inner.held_out_auc
    }

    /// Knowledge file (JSON) the model was trained against.
    pub fn knowledge_json(&self) -> Result<String, JsError> {
        self.inner.knowledge_json().map_err(|e| JsError::new(&e))
    }

    /// Captions of a held-out video, one per line.
    pub fn example(&self, abnormal: bool) -> String {
        self.inner.example(abnormal)
    }
}

/// AUC, AP, accuracy and ROC points for comma- or whitespace-separated
/// scores and 0/1 labels.
#[wasm_bindgen]
pub fn ranking_metrics(scores: &str, labels: &str, threshold: f64) -> Result<String, JsError> {
    demo::ranking_metrics(scores, labels, threshold).map_err(|e| JsError::new(&e))
}

/// Cosine similarity of two texts' mean hashed token embeddings.
#[wasm_bindgen]
pub fn text_similarity(a: &str, b: &str) -> Result<f64, JsError> {
    demo::text_similarity(a, b).map_err(|e| JsError::new(&e))
}
