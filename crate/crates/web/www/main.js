import init, { Survey, quantizeInt8 } from "./pkg/caecnnloc_web.js";

const $ = (id) => document.getElementById(id);

await init();
const survey = new Survey(7);
const side = survey.imageSide();
const plan = $("floorplan");
const scale = Math.min(plan.width / survey.width(), plan.height / survey.depth());
let pick = { x: survey.width() / 2, y: survey.depth() / 2 };

for (let f = 0; f < survey.floors(); f++) {
  $("floor").add(new Option(`Floor ${f}`, f));
}

function hue(k) {
  return `hsl(${(k * 137.508) % 360} 65% 55%)`;
}

function drawGrid() {
  const cell = Number($("cell").value);
  const floor = Number($("floor").value);
  $("cell-out").value = cell;
  const view = JSON.parse(survey.grid(cell, floor));
  $("classes").value = view.class_count;
  $("cells").value = view.cells.length;

  const ctx = plan.getContext("2d");
  ctx.clearRect(0, 0, plan.width, plan.height);
  const [ox, oy] = view.origin;
  for (const c of view.cells) {
    ctx.fillStyle = hue(c.class_id);
    ctx.globalAlpha = 0.25;
    const x = (ox + c.ix * cell) * scale;
    const y = (oy + c.iy * cell) * scale;
    ctx.fillRect(x, y, cell * scale, cell * scale);
    ctx.globalAlpha = 1;
    ctx.strokeStyle = "#0003";
    ctx.strokeRect(x, y, cell * scale, cell * scale);
  }
  for (const [x, y, k] of view.points) {
    ctx.fillStyle = hue(k);
    ctx.fillRect(x * scale - 2, y * scale - 2, 4, 4);
  }
  ctx.strokeStyle = "#000";
  for (const c of view.cells) {
    const [cx, cy] = c.centroid;
    ctx.beginPath();
    ctx.moveTo(cx * scale - 4, cy * scale - 4);
    ctx.lineTo(cx * scale + 4, cy * scale + 4);
    ctx.moveTo(cx * scale + 4, cy * scale - 4);
    ctx.lineTo(cx * scale - 4, cy * scale + 4);
    ctx.stroke();
  }
  ctx.strokeStyle = "#d00";
  ctx.beginPath();
  ctx.arc(pick.x * scale, pick.y * scale, 7, 0, 2 * Math.PI);
  ctx.stroke();
}

function drawImage() {
  const noise = Number($("noise").value);
  $("noise-out").value = noise;
  $("pos").value = `${pick.x.toFixed(1)}, ${pick.y.toFixed(1)}`;
  const pixels = survey.radioImage(pick.x, pick.y, Number($("floor").value), noise, Number($("seed").value));
  const canvas = $("image");
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(side, side);
  pixels.forEach((v, i) => {
    const g = Math.round(v * 255);
    img.data.set([g, g, g, 255], i * 4);
  });
  const tmp = new OffscreenCanvas(side, side);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function drawQuant() {
  const values = $("weights").value.split(/[\s,]+/).filter(Boolean).map(Number);
  if (values.length === 0 || values.some(Number.isNaN)) {
    $("table").textContent = "enter numbers";
    return;
  }
  try {
    const q = JSON.parse(quantizeInt8(Float32Array.from(values)));
    $("scale").value = q.scale.toPrecision(4);
    $("zp").value = q.zero_point;
    $("err").value = q.max_abs_error.toPrecision(3);
    $("half").value = (q.scale / 2).toPrecision(3);
    const rows = values.map((v, i) => `${v.toFixed(4).padStart(10)}  ->  ${String(q.codes[i]).padStart(4)}  ->  ${q.dequantized[i].toFixed(4).padStart(10)}`);
    $("table").textContent = "     value    code     restored\n" + rows.join("\n");
  } catch (e) {
    $("table").textContent = String(e);
  }
}

function gaussian() {
  const u = 1 - Math.random();
  return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * Math.random());
}

plan.addEventListener("click", (e) => {
  const r = plan.getBoundingClientRect();
  pick = { x: (e.clientX - r.left) / scale, y: (e.clientY - r.top) / scale };
  drawGrid();
  drawImage();
});
$("cell").addEventListener("input", drawGrid);
$("floor").addEventListener("change", () => { drawGrid(); drawImage(); });
$("noise").addEventListener("input", drawImage);
$("seed").addEventListener("input", drawImage);
$("weights").addEventListener("input", drawQuant);
$("random").addEventListener("click", () => {
  $("weights").value = Array.from({ length: 12 }, () => (gaussian() * 0.3).toFixed(3)).join(", ");
  drawQuant();
});

drawGrid();
drawImage();
drawQuant();
