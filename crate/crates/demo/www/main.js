import init, { Demo } from "./pkg/lapr_demo.js";

const $ = (id) => document.getElementById(id);
let demo = null;

function drawLoss(p) {
  const c = $("loss"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const series = [
    [p.expert_loss, "#1f5fbf"],
    [p.router_loss.filter((x) => x !== null), "#d9822b"],
  ];
  const all = series.flatMap(([s]) => s);
  if (all.length === 0) return;
  const lo = Math.min(...all), hi = Math.max(...all);
  const n = Math.max(p.expert_loss.length, 2);
  for (const [s, color] of series) {
    g.strokeStyle = color;
    g.beginPath();
    s.forEach((v, i) => {
      const x = 10 + (i / (n - 1)) * (c.width - 20);
      const y = c.height - 10 - ((v - lo) / (hi - lo || 1)) * (c.height - 20);
      i ? g.lineTo(x, y) : g.moveTo(x, y);
    });
    g.stroke();
  }
}

function fillTable(el, picks, mode) {
  el.innerHTML = "<tr><th>id</th><th>score</th><th>mode</th><th>cat</th></tr>" + picks
    .map((p) => `<tr class="${p.mode === mode ? "hit" : "miss"}"><td>${p.id}</td><td>${p.score.toFixed(3)}</td><td>${p.mode}</td><td>${p.category}</td></tr>`)
    .join("");
}

function drawHeat() {
  const t = JSON.parse(demo.activation());
  const c = $("heat"), g = c.getContext("2d");
  const rows = t.mean_weight.length, cols = t.mean_weight[0].length;
  const w = c.width / cols, h = c.height / rows;
  g.clearRect(0, 0, c.width, c.height);
  t.mean_weight.forEach((row, r) => row.forEach((v, k) => {
    const shade = Math.round(255 * (1 - Math.min(1, v * cols / 2)));
    g.fillStyle = `rgb(${shade},${shade},255)`;
    g.fillRect(k * w, r * h, w - 1, h - 1);
    g.fillStyle = "#000";
    g.fillText(v.toFixed(2), k * w + 4, r * h + h / 2);
  }));
}

function compare() {
  const i = Number($("query").value);
  const c = JSON.parse(demo.compare(i, 5));
  $("query-label").textContent = `#${i}: mode ${c.query_mode}, category ${c.query_category}, mixture [${c.mixture.map((w) => w.toFixed(2)).join(", ")}]`;
  fillTable($("lapr"), c.lapr, c.query_mode);
  fillTable($("baseline"), c.baseline, c.query_mode);
}

function show(p) {
  $("status").textContent =
    `epochs ${p.epochs}  model acc ${p.lapr.mode_match_acc.toFixed(3)}  baseline acc ${p.baseline.mode_match_acc.toFixed(3)}`;
  drawLoss(p);
  compare();
  drawHeat();
}

function reset() {
  demo?.free();
  demo = new Demo(Number($("seed").value), $("use-label").checked);
  $("query").max = demo.eval_queries - 1;
  show(JSON.parse(demo.status()));
}

await init();
reset();
$("reset").onclick = reset;
$("train1").onclick = () => show(JSON.parse(demo.train(1)));
$("train10").onclick = () => show(JSON.parse(demo.train(10)));
$("query").oninput = compare;
