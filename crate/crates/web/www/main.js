import init, { renderSample, aucFromText, padBetweenClouds } from "./pkg/soda_web.js";

const $ = (id) => document.getElementById(id);

function draw(canvas, image) {
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(image.rgba), image.size, image.size), 0, 0);
}

function renderPair() {
  const args = [+$("gamma").value, +$("sigma").value, +$("vignette").value, +$("seed").value];
  try {
    const src = renderSample(false, ...args);
    const tgt = renderSample(true, ...args);
    draw($("source"), src);
    draw($("target"), tgt);
    $("source-labels").textContent = src.labels;
    $("target-labels").textContent = tgt.labels;
  } catch (e) {
    $("target-labels").textContent = e.message;
  }
}

function scoreAuc() {
  try {
    $("auc").textContent = aucFromText($("auc-input").value).toFixed(4);
  } catch (e) {
    $("auc").textContent = e.message;
  }
}

function measurePad() {
  $("pad").textContent = padBetweenClouds(+$("separation").value, 200, 4, 0).toFixed(3);
}

await init();
for (const id of ["gamma", "sigma", "vignette", "seed"]) $(id).addEventListener("input", renderPair);
$("auc-input").addEventListener("input", scoreAuc);
$("separation").addEventListener("input", measurePad);
renderPair();
scoreAuc();
measurePad();
