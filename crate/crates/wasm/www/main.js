import init, { Demo } from "./pkg/pspinv_wasm.js";

await init();
const demo = new Demo(32);
const $ = (id) => document.getElementById(id);
let phi = demo.random_phi(0n);
let micro = null;
let draws = 0;

function paint(canvas, n, values, color) {
  canvas.width = n;
  canvas.height = n;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(n, n);
  let lo = Infinity, hi = -Infinity;
  for (const v of values) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  const span = hi > lo ? hi - lo : 1;
  values.forEach((v, k) => {
    const [r, g, b] = color((v - lo) / span);
    img.data.set([r, g, b, 255], 4 * k);
  });
  ctx.putImageData(img, 0, 0);
}

const heat = (t) => [255 * Math.min(1, 2 * t), 255 * Math.max(0, 2 * t - 1), 80 * (1 - t)];
const gray = (t) => [255 * t, 255 * t, 255 * t];

function drawSdf() {
  const res = 64;
  const g = demo.sdf_heatmap(Float64Array.from(phi), res);
  // y grows upward
  const flipped = new Float64Array(res * res);
  for (let i = 0; i < res; i++) flipped.set(g.subarray((res - 1 - i) * res, (res - i) * res), i * res);
  paint($("sdf"), res, flipped, heat);
}

function sample() {
  const vf = Number($("vf").value);
  micro = demo.microstructure(Float64Array.from(phi), vf, BigInt(draws++));
  const frac = micro.reduce((a, b) => a + b, 0) / micro.length;
  paint($("micro"), demo.n_p, micro, gray);
  $("micro-cap").textContent = `microstructure, phase-1 fraction ${frac.toFixed(3)}`;
  $("props").textContent = "-";
}

$("new-phi").onclick = () => {
  phi = demo.random_phi(BigInt($("phi-seed").value));
  drawSdf();
  sample();
};
$("vf").oninput = () => { $("vf-out").textContent = Number($("vf").value).toFixed(2); };
$("sample").onclick = sample;
$("homog").onclick = () => {
  if (!micro) return;
  const t0 = performance.now();
  const [a11, c] = demo.properties(micro, 1);
  const [, a22] = demo.properties(micro, 2);
  const ms = (performance.now() - t0).toFixed(0);
  $("props").textContent = `a11 = ${a11.toFixed(4)}, a22 = ${a22.toFixed(4)}, (C1111 + C2222)/2 = ${c.toFixed(3)}  (${ms} ms)`;
};

drawSdf();
sample();
