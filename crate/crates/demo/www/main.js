// Build: wasm-bindgen --target web --out-dir www/pkg <tokenroute_demo.wasm>
import init, { Demo } from "./pkg/tokenroute_demo.js";

const $ = (id) => document.getElementById(id);
let demo;

function run(button, f) {
  $(button).addEventListener("click", () => {
    $("status").textContent = "working...";
    // Let the status paint before the synchronous wasm call.
    setTimeout(() => {
      try {
        f();
        $("status").textContent = "ready";
      } catch (e) {
        $("status").textContent = "error: " + e;
      }
    }, 10);
  });
}

function renderTokens(tokens) {
  const out = $("output");
  out.textContent = "";
  for (const t of tokens) {
    const span = document.createElement("span");
    span.textContent = t.text;
    if (t.llm) span.className = "llm";
    if (t.confidence !== null) span.title = "confidence " + t.confidence.toFixed(3);
    out.appendChild(span);
  }
}

function generate() {
  const r = JSON.parse(demo.generate(
    $("prompt").value,
    Number($("threshold").value),
    Number($("max-tokens").value),
    Number($("burst").value),
    $("reprefill").checked,
  ));
  renderTokens(r.tokens);
  const m = r.metrics;
  $("gen-stats").textContent = m
    ? `${m.generated_tokens} tokens, ${m.routed_tokens} from the LLM in ${m.routing_number} calls; modeled overall ${m.overall_s.toFixed(2)} s`
    : "";
  if (r.error) $("gen-stats").textContent += " (stopped: " + r.error + ")";
}

function drawCurve(curve) {
  const c = $("curve");
  const g = c.getContext("2d");
  const pad = 40, w = c.width - 2 * pad, h = c.height - 2 * pad;
  const x = (v) => pad + v * w;
  const y = (v) => pad + h - v * h;
  g.clearRect(0, 0, c.width, c.height);
  g.strokeStyle = "#999";
  g.strokeRect(pad, pad, w, h);
  g.fillStyle = "#444";
  g.font = "12px sans-serif";
  g.fillText("routed ratio", pad + w / 2 - 30, c.height - 8);
  g.fillText("accuracy", 4, pad - 10);
  for (const v of [0, 0.5, 1]) {
    g.fillText(v.toString(), x(v) - 6, pad + h + 14);
    g.fillText(v.toString(), pad - 22, y(v) + 4);
  }
  g.setLineDash([4, 4]);
  g.beginPath();
  g.moveTo(x(0), y(curve.small_only_accuracy));
  g.lineTo(x(1), y(curve.small_only_accuracy));
  g.stroke();
  g.setLineDash([]);
  g.strokeStyle = "#c00";
  g.beginPath();
  curve.points.forEach((p, i) => (i ? g.lineTo : g.moveTo).call(g, x(p.routed_ratio), y(p.accuracy)));
  g.stroke();
  g.fillStyle = "#c00";
  for (const p of curve.points) g.fillRect(x(p.routed_ratio) - 2, y(p.accuracy) - 2, 4, 4);
}

function sweep() {
  const thresholds = [];
  for (let t = 0; t <= 1.0001; t += 0.05) thresholds.push(Math.min(1, Number(t.toFixed(2))));
  const curve = JSON.parse(demo.sweep(Number($("items").value), Number($("corruption").value), new Float64Array(thresholds)));
  drawCurve(curve);
  const best = curve.points.filter((p) => p.routed_ratio <= 0.2).pop();
  $("sweep-stats").textContent = `small model alone: ${(curve.small_only_accuracy * 100).toFixed(1)}%` +
    (best ? `; threshold ${best.threshold.toFixed(2)} routes ${(best.routed_ratio * 100).toFixed(1)}% of tokens for ${(best.accuracy * 100).toFixed(1)}%` : "");
}

function latency() {
  const r = JSON.parse(demo.latency(
    Number($("lat-threshold").value),
    Number($("comm").value),
    Number($("llm").value),
    $("lat-reprefill").checked,
  ));
  const m = r.metrics;
  const rows = [
    ["TTFT", m.ttft_s], ["SLM inference", m.slm_inference_s], ["TBT (SLM)", m.tbt_slm_s],
    ["comm + LLM", m.comm_llm_s], ["routing number", m.routing_number], ["overall", m.overall_s], ["residual", r.residual_s],
  ];
  $("lat-table").innerHTML = "<tr><th>metric</th><th>mean</th></tr>" +
    rows.map(([k, v]) => `<tr><td>${k}</td><td>${v.toFixed(3)}${k === "routing number" ? "" : " s"}</td></tr>`).join("");
}

$("threshold").addEventListener("input", () => ($("threshold-value").textContent = Number($("threshold").value).toFixed(2)));

init().then(() => {
  demo = new Demo();
  run("generate", generate);
  run("sweep", sweep);
  run("latency", latency);
  $("status").textContent = "ready";
});
