import type { ConsoleApp, ConsoleState } from "./app.js";
import { formatUs } from "./readout.js";
import type { OverrideValue } from "./types.js";

const KNOWN_METRICS = ["latency", "memory", "disk_io"];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function esc(text: string): string {
  const div = document.createElement("div");
  div.textContent = text;
  return div.innerHTML;
}

export function bind(app: ConsoleApp): void {
  el<HTMLInputElement>("host").value = app.state.host;
  el<HTMLInputElement>("host").addEventListener("change", (e) => {
    void app.setHost((e.target as HTMLInputElement).value.trim());
  });
  el<HTMLInputElement>("global-enabled").addEventListener("change", (e) => {
    app.setGlobalEnabled((e.target as HTMLInputElement).checked);
  });
  for (const metric of KNOWN_METRICS) {
    el<HTMLInputElement>(`metric-${metric}`).addEventListener("change", (e) => {
      app.toggleMetric(metric, (e.target as HTMLInputElement).checked);
    });
  }
  el<HTMLInputElement>("sample-rate").addEventListener("change", (e) => {
    app.setSampleRate(Number((e.target as HTMLInputElement).value));
  });
  el<HTMLInputElement>("concise-us").addEventListener("change", (e) => {
    app.setConciseThresholdUs(Number((e.target as HTMLInputElement).value));
  });
  el<HTMLButtonElement>("add-override").addEventListener("click", () => {
    const name = el<HTMLInputElement>("override-name").value.trim();
    const value = el<HTMLSelectElement>("override-value").value as OverrideValue;
    if (name) app.setOverride(name, value);
  });
  el<HTMLButtonElement>("apply").addEventListener("click", () => void app.apply());
  el<HTMLButtonElement>("discard").addEventListener("click", () => app.discardDraft());
}

export function render(state: ConsoleState): void {
  el("banner").className = state.stale ? "banner stale" : "banner hidden";
  el("banner").textContent = state.stale
    ? `collector unreachable — showing stale data (${state.error ?? ""})`
    : "";

  el<HTMLInputElement>("global-enabled").checked = state.draft.global_enabled;
  for (const metric of KNOWN_METRICS) {
    const metrics = state.draft.enabled_metrics;
    el<HTMLInputElement>(`metric-${metric}`).checked =
      metrics.includes(metric) || metrics.includes("*");
  }
  el<HTMLInputElement>("sample-rate").value = String(state.draft.sample_rate);
  el<HTMLInputElement>("concise-us").value = String(state.draft.concise_threshold_us);

  el("overrides").innerHTML =
    Object.entries(state.draft.target_overrides)
      .map(
        ([name, value]) =>
          `<li><code>${esc(name)}</code> → ${esc(value)} ` +
          `<button data-target="${esc(name)}" class="rm">remove</button></li>`,
      )
      .join("") || "<li class=muted>no per-target overrides</li>";

  el("revision").textContent =
    state.revision === null
      ? "revision: –"
      : `revision: ${state.revision}` +
        (state.dirty ? " (draft edited, not applied)" : "") +
        (state.lastAppliedRevision !== null
          ? ` · last applied: ${state.lastAppliedRevision}`
          : "");

  el("problems").innerHTML = state.problems.map((p) => `<li>${esc(p)}</li>`).join("");
  el("error").textContent = state.stale ? "" : state.error ?? "";

  el("readout").textContent = state.readout
    ? `tracing overhead: ${state.readout.text}`
    : "tracing overhead: no data yet";

  el("trees").innerHTML = state.trees
    .map(
      (s) =>
        `<tr><td><code>${esc(s.tree_id.slice(0, 8))}</code></td>` +
        `<td>${esc(s.root_name)}</td><td>${esc(s.metric)}</td>` +
        `<td class=num>${formatUs(s.root_span)}${esc(s.unit)}</td>` +
        `<td class=num>${s.overhead_us}us</td>` +
        `<td class=num>${esc(s.overhead_pct)}</td>` +
        `<td>${esc(s.host)}</td></tr>`,
    )
    .join("");
}

export function wireOverrideRemoval(app: ConsoleApp): void {
  el("overrides").addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    if (target.classList.contains("rm")) {
      app.setOverride(target.dataset["target"] ?? "", null);
    }
  });
}
