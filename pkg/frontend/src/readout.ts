import type { TreeSummary } from "./types.js";

export interface OverheadReadout {
  count: number;
  medianUs: number;
  maxUs: number;
  medianPct: number | null;
  maxPct: number | null;
  text: string;
}

/** 3-decimal percentage with trailing zeros trimmed: 0.00407 -> "0.004". */
export function formatPercent(pct: number): string {
  const text = pct.toFixed(3).replace(/0+$/, "").replace(/\.$/, "");
  return text === "" || text === "-" ? "0" : text;
}

export function formatUs(us: number): string {
  return Number.isInteger(us) ? String(us) : us.toFixed(1);
}

function median(values: number[]): number {
  const sorted = [...values].sort((a, b) => a - b);
  const mid = Math.floor(sorted.length / 2);
  return sorted.length % 2 ? sorted[mid]! : (sorted[mid - 1]! + sorted[mid]!) / 2;
}

/**
 * Median and max tracing overhead over the newest `windowSize` latency
 * trees, in both microseconds and percent of each tree's root span. Every
 * figure is recomputed from the summaries the collector returned; nothing
 * is invented client-side.
 */
export function overheadReadout(
  summaries: TreeSummary[],
  windowSize = 20,
): OverheadReadout | null {
  const window = summaries.filter((s) => s.metric === "latency").slice(0, windowSize);
  if (window.length === 0) return null;

  const overheads = window.map((s) => s.overhead_us);
  const percents = window
    .filter((s) => s.root_span > 0)
    .map((s) => (100 * s.overhead_us) / s.root_span);

  const medianUs = median(overheads);
  const maxUs = Math.max(...overheads);
  const medianPct = percents.length ? median(percents) : null;
  const maxPct = percents.length ? Math.max(...percents) : null;

  const pctText = (pct: number | null) => (pct === null ? "n/a" : `${formatPercent(pct)}%`);
  const text =
    `median ${formatUs(medianUs)}us (${pctText(medianPct)}) · ` +
    `max ${formatUs(maxUs)}us (${pctText(maxPct)}) over ${window.length} trees`;

  return { count: window.length, medianUs, maxUs, medianPct, maxPct, text };
}
