import init, { Detector, ranking_metrics, text_similarity } from "./pkg/tbvad_web.js";

const $ = (id) => document.getElementById(id);
let detector = null;

function showError(target, err) {
  target.innerHTML = "";
  const p = document.createElement("p");
  p.className = "error";
  p.textContent = String(err && err.message ? err.message : err);
  target.appendChild(p);
}

function renderRecord(record) {
  const out = $("explanation");
  out.innerHTML = "";
  const table = document.createElement("table");
  table.innerHTML = "<tr><th>Aspect</th><th>Weight</th><th></th><th>Margin</th></tr>";
  for (const [aspect, w] of Object.entries(record.slot_weights)) {
    const tr = document.createElement("tr");
    const margin = aspect in record.margins ? record.margins[aspect].toFixed(3) : "";
    tr.innerHTML = `<td>${aspect}</td><td>${(w * 100).toFixed(1)}%</td>` +
      `<td><span class="bar" style="width:${Math.round(w * 200)}px"></span></td><td>${margin}</td>`;
    table.appendChild(tr);
  }
  out.appendChild(table);
  const pre = document.createElement("pre");
  pre.textContent = record.rationale;
  out.appendChild(pre);
}

function drawRoc(points) {
  const c = $("roc");
  const ctx = c.getContext("2d");
  const s = c.width;
  ctx.clearRect(0, 0, s, s);
  ctx.strokeStyle = "#bbb";
  ctx.strokeRect(0.5, 0.5, s - 1, s - 1);
  ctx.beginPath();
  ctx.moveTo(0, s);
  ctx.lineTo(s, 0);
  ctx.setLineDash([4, 4]);
  ctx.stroke();
  ctx.setLineDash([]);
  ctx.strokeStyle = "#4a7bd1";
  ctx.lineWidth = 2;
  ctx.beginPath();
  points.forEach(([fpr, tpr], i) => {
    const x = fpr * s;
    const y = s - tpr * s;
    if (i === 0) ctx.moveTo(x, y); else ctx.lineTo(x, y);
  });
  ctx.stroke();
}

function computeMetrics() {
  try {
    const r = JSON.parse(ranking_metrics($("scores").value, $("labels").value, Number($("threshold").value)));
    $("metrics-out").textContent =
      `AUC ${r.auc.toFixed(4)} · AP ${r.ap.toFixed(4)} · accuracy ${r.accuracy.toFixed(4)}`;
    drawRoc(r.roc);
  } catch (err) {
    showError($("metrics-out"), err);
  }
}

function compareTexts() {
  try {
    $("similarity-out").textContent = `cosine ${text_similarity($("text-a").value, $("text-b").value).toFixed(4)}`;
  } catch (err) {
    showError($("similarity-out"), err);
  }
}

function explain() {
  try {
    const json = detector.explain($("captions").value, Number($("topk").value), $("counterfactual").checked);
    renderRecord(JSON.parse(json));
  } catch (err) {
    showError($("explanation"), err);
  }
}

async function main() {
  await init();
  for (const id of ["metrics", "similarity"]) $(id).disabled = false;
  $("metrics").addEventListener("click", computeMetrics);
  $("similarity").addEventListener("click", compareTexts);
  computeMetrics();

  $("status").textContent = "Training the detector on a synthetic corpus…";
  // let the status message paint before the blocking training run
  await new Promise((resolve) => setTimeout(resolve, 30));
  try {
    detector = new Detector(0);
  } catch (err) {
    showError($("status"), err);
    return;
  }
  $("status").textContent = `Detector ready (held-out AUC ${detector.held_out_auc.toFixed(3)}).`;
  for (const id of ["explain", "example-normal", "example-abnormal"]) $(id).disabled = false;
  $("example-normal").addEventListener("click", () => { $("captions").value = detector.example(false); });
  $("example-abnormal").addEventListener("click", () => { $("captions").value = detector.example(true); });
  $("explain").addEventListener("click", explain);
  $("captions").value = detector.example(true);
  explain();
}

main();
