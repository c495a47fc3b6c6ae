import init, { utView, diSolve, diMontecarlo } from "./pkg/tsddp_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function frame(canvas, xs, ys, pad = 30) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const x0 = Math.min(...xs), x1 = Math.max(...xs);
  const y0 = Math.min(...ys), y1 = Math.max(...ys);
  const sx = (canvas.width - 2 * pad) / (x1 - x0 || 1);
  const sy = (canvas.height - 2 * pad) / (y1 - y0 || 1);
  return {
    ctx,
    x: (v) => pad + (v - x0) * sx,
    y: (v) => canvas.height - pad - (v - y0) * sy,
    sx, sy,
  };
}

function line(f, xs, ys, color) {
  f.ctx.strokeStyle = color;
  f.ctx.beginPath();
  xs.forEach((x, i) => (i ? f.ctx.lineTo(f.x(x), f.y(ys[i])) : f.ctx.moveTo(f.x(x), f.y(ys[i]))));
  f.ctx.stroke();
}

function ellipse(f, m, cov, color) {
  const a = cov[0][0], b = cov[0][1], d = cov[1][1];
  const tr = (a + d) / 2, det = Math.sqrt(Math.max(tr * tr - (a * d - b * b), 0));
  const l1 = tr + det, l2 = Math.max(tr - det, 0);
  const ang = Math.atan2(l1 - a, b || 1e-300);
  const xs = [], ys = [];
  for (let i = 0; i <= 64; i++) {
    const t = (2 * Math.PI * i) / 64;
    const u = 2 * Math.sqrt(l1) * Math.cos(t), v = 2 * Math.sqrt(l2) * Math.sin(t);
    xs.push(m[0] + u * Math.cos(ang) - v * Math.sin(ang));
    ys.push(m[1] + u * Math.sin(ang) + v * Math.cos(ang));
  }
  line(f, xs, ys, color);
}

function guard(out, fn) {
  try {
    out.classList.remove("err");
    fn();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e.message ?? e);
  }
}

function runUt() {
  guard($("ut-out"), () => {
    const v = JSON.parse(utView(num("ut-r"), num("ut-t"), num("ut-sr"), num("ut-st"), 2000, 1n));
    const pts = v.samples.concat(v.sigma_cartesian);
    const f = frame($("ut-plot"), pts.map((p) => p[0]), pts.map((p) => p[1]));
    f.ctx.fillStyle = "#bbb";
    v.samples.forEach((p) => f.ctx.fillRect(f.x(p[0]) - 1, f.y(p[1]) - 1, 2, 2));
    f.ctx.fillStyle = "#d22";
    v.sigma_cartesian.forEach((p) => f.ctx.fillRect(f.x(p[0]) - 3, f.y(p[1]) - 3, 6, 6));
    ellipse(f, v.sampled.mean, v.sampled.cov, "#000");
    ellipse(f, v.unscented.mean, v.unscented.cov, "#24c");
    ellipse(f, v.linearized.mean, v.linearized.cov, "#2a2");
    const fmt = (m) => `mean (${m.mean.map((x) => x.toFixed(4)).join(", ")})`;
    $("ut-out").textContent =
      `sampled     ${fmt(v.sampled)}\nunscented   ${fmt(v.unscented)}\nlinearized  ${fmt(v.linearized)}`;
  });
}

function runDi() {
  $("di-out").textContent = "solving...";
  setTimeout(() => guard($("di-out"), () => {
    const v = JSON.parse(diSolve($("di-mode").value, num("di-duty")));
    const t = v.controls.map((_, k) => k * v.dt);
    const all = v.controls.flat().concat([v.bound, -v.bound]);
    const f = frame($("di-plot"), t, all);
    line(f, [0, t[t.length - 1]], [v.bound, v.bound], "#aaa");
    line(f, [0, t[t.length - 1]], [-v.bound, -v.bound], "#aaa");
    const m = v.controls[0].length;
    for (let j = m - 1; j >= 0; j--) {
      line(f, t, v.controls.map((u) => u[j]), j === 0 ? "#24c" : "#e90");
    }
    const n = v.position.length - 1;
    $("di-out").textContent =
      `${v.mode}: ${v.status} after ${v.iterations} iterations, objective ${v.objective.toFixed(4)}\n` +
      `final position ${v.position[n].toFixed(4)} (sd ${v.position_sd[n].toExponential(2)}), velocity ${v.velocity[n].toFixed(4)}`;
  }), 0);
}

function runMc() {
  $("mc-out").textContent = "running...";
  setTimeout(() => guard($("mc-out"), () => {
    const v = JSON.parse(
      diMontecarlo($("mc-mode").value, num("mc-duty"), num("mc-n"), BigInt(num("mc-seed")), $("mc-sat").checked),
    );
    const ks = v.trajectories[0].map((_, k) => k);
    const f = frame($("mc-traj"), ks, v.trajectories.flat());
    v.trajectories.forEach((p) => line(f, ks, p, "rgba(40,80,200,0.5)"));
    const g = frame($("mc-cdf"), v.cdf_total.map((p) => p[0]), [0, 1]);
    line(g, v.cdf_total.map((p) => p[0]), v.cdf_total.map((p) => p[1]), "#24c");
    $("mc-out").textContent =
      `${v.mode}: ${v.samples} runs, ${v.failed} failed\n` +
      `median total ${v.median_total.toFixed(4)}, median delta-v ${v.median_delta_v.toFixed(4)}, ` +
      `bound violations ${(100 * v.violation).toFixed(2)}%`;
  }), 0);
}

await init();
$("status").textContent = "Ready. Solves run on the page thread and can take a few seconds.";
$("ut-run").onclick = runUt;
$("di-run").onclick = runDi;
$("mc-run").onclick = runMc;
runUt();
