// Wire types mirroring the collector's JSON responses.

export type OverrideValue = "on" | "off" | "inherit";

export interface ControlBlock {
  version: number;
  seq: number;
  global_enabled: boolean;
  enabled_metrics: string[];
  target_overrides: Record<string, OverrideValue>;
  concise_threshold_us: number;
  sample_rate: number;
}

export interface TreeSummary {
  tree_id: string;
  metric: string;
  unit: string;
  host: string;
  root_name: string;
  root_span: number;
  overhead_us: number;
  overhead_pct: string;
  created_at_us: number;
  received_at_us: number;
}

export interface ConfigResponse {
  revision: number;
  block: ControlBlock;
}

export function defaultBlock(): ControlBlock {
  return {
    version: 1,
    seq: 0,
    global_enabled: true,
    enabled_metrics: ["*"],
    target_overrides: {},
    concise_threshold_us: 0,
    sample_rate: 1.0,
  };
}

/** Client-side mirror of the collector's block validation, for inline
 * highlighting before a PUT is attempted. */
export function validateBlock(block: ControlBlock): string[] {
  const problems: string[] = [];
  if (!(block.sample_rate >= 0 && block.sample_rate <= 1)) {
    problems.push("sample_rate must be in [0, 1]");
  }
  if (!Number.isInteger(block.concise_threshold_us) || block.concise_threshold_us < 0) {
    problems.push("concise_threshold_us must be an integer >= 0");
  }
  for (const [name, value] of Object.entries(block.target_overrides)) {
    if (value !== "on" && value !== "off" && value !== "inherit") {
      problems.push(`target_overrides['${name}'] must be on/off/inherit`);
    }
  }
  if (block.enabled_metrics.some((m) => !m)) {
    problems.push("enabled_metrics entries must be non-empty");
  }
  return problems;
}
