import init, { weight_curves, compare_losses, noise_groups } from "./pkg/dimp_demo.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];

// Line plot of several series over a shared x axis.
function plot(canvas, xs, series, yMax) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 36;
  ctx.clearRect(0, 0, w, h);
  const all = series.flatMap((s) => s.values).filter(Number.isFinite);
  const lo = Math.min(0, ...all);
  const hi = yMax ?? Math.max(...all);
  const x0 = xs[0], x1 = xs[xs.length - 1];
  const px = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const py = (y) => h - pad - ((Math.min(y, hi) - lo) / (hi - lo || 1)) * (h - 2 * pad);

  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.fillText(hi.toFixed(2), 2, pad + 4);
  ctx.fillText(lo.toFixed(2), 2, h - pad);
  ctx.fillText(String(x0), pad, h - pad + 14);
  ctx.fillText(String(x1), w - pad - 16, h - pad + 14);

  series.forEach((s, k) => {
    ctx.strokeStyle = s.color ?? COLORS[k % COLORS.length];
    ctx.lineWidth = 2;
    ctx.beginPath();
    s.values.forEach((y, i) => (i ? ctx.lineTo(px(xs[i]), py(y)) : ctx.moveTo(px(xs[i]), py(y))));
    ctx.stroke();
  });
}

function fail(el, err) {
  el.innerHTML = `<p class="err">${err}</p>`;
}

function drawCurves() {
  const q = +$("c-quality").value, g = +$("c-gamma").value, cap = +$("c-cap").value;
  $("c-quality-v").textContent = q.toFixed(2);
  $("c-gamma-v").textContent = g.toFixed(1);
  try {
    const c = JSON.parse(weight_curves(q, g, 1e-4, cap, 200));
    plot($("c-canvas"), c.p, [
      { values: c.ratio_weight },
      { values: c.focal_weight },
      { values: c.bound_lhs },
      { values: c.bound_rhs },
    ], Math.min(cap, 5));
  } catch (e) {
    fail($("c-canvas").parentElement.querySelector(".legend"), e);
  }
}

function table(rows, cols) {
  const head = cols.map((c) => `<th>${c}</th>`).join("");
  const body = rows
    .map((r) => "<tr>" + cols.map((c) => `<td>${typeof r[c] === "number" ? r[c].toFixed(4) : r[c]}</td>`).join("") + "</tr>")
    .join("");
  return `<table><tr>${head}</tr>${body}</table>`;
}

function runCompare() {
  $("w-label-v").textContent = (+$("w-label").value).toFixed(2);
  $("w-cov-v").textContent = (+$("w-cov").value).toFixed(2);
  const out = $("w-out");
  out.textContent = "training...";
  // Let the status text paint before the synchronous call.
  setTimeout(() => {
    try {
      const r = JSON.parse(compare_losses(+$("w-label").value, +$("w-cov").value, +$("w-n").value, +$("w-epochs").value, BigInt($("w-seed").value)));
      out.innerHTML = `<p>true conditional KL(P || Q) = ${r.kl_p_q.toFixed(4)}</p>` +
        table(r.rows, ["loss", "exact_p_ce", "accuracy", "macro_f1"]);
      const epochs = r.rows[0].epoch_loss.map((_, i) => i + 1);
      plot($("w-canvas"), epochs, r.rows.map((row) => ({ values: row.epoch_loss })));
    } catch (e) {
      fail(out, e);
    }
  }, 10);
}

function runNoise() {
  const out = $("n-out");
  out.textContent = "running...";
  setTimeout(() => {
    try {
      const rows = JSON.parse(noise_groups(BigInt($("n-seed").value), +$("n-epochs").value, $("n-clean").checked));
      out.innerHTML = table(rows, ["group", "n", "quality", "diversity", "imp_weight"]) +
        `<p class="legend">${rows.map((r, k) => `<span style="color:${COLORS[k]}">DIMP weight: ${r.group}</span>`).join("")}</p>`;
      const epochs = rows[0].dimp_weight_by_epoch.map((_, i) => i + 1);
      plot($("n-canvas"), epochs, rows.map((r) => ({ values: r.dimp_weight_by_epoch })));
    } catch (e) {
      fail(out, e);
    }
  }, 10);
}

await init();
["c-quality", "c-gamma", "c-cap"].forEach((id) => $(id).addEventListener("input", drawCurves));
["w-label", "w-cov"].forEach((id) => $(id).addEventListener("input", () => {
  $("w-label-v").textContent = (+$("w-label").value).toFixed(2);
  $("w-cov-v").textContent = (+$("w-cov").value).toFixed(2);
}));
$("w-run").addEventListener("click", runCompare);
$("n-run").addEventListener("click", runNoise);
drawCurves();
runCompare();
runNoise();
