import type { CollectorApi } from "./api.js";
import { overheadReadout, type OverheadReadout } from "./readout.js";
import {
  defaultBlock,
  validateBlock,
  type ControlBlock,
  type OverrideValue,
  type TreeSummary,
} from "./types.js";

export interface ConsoleState {
  host: string;
  /** Last block the collector acknowledged. */
  remote: ControlBlock;
  /** Local edits; sent to the collector only on apply(). */
  draft: ControlBlock;
  dirty: boolean;
  revision: number | null;
  lastAppliedRevision: number | null;
  trees: TreeSummary[];
  readout: OverheadReadout | null;
  stale: boolean;
  problems: string[];
  error: string | null;
}

const clone = (block: ControlBlock): ControlBlock =>
  JSON.parse(JSON.stringify(block)) as ControlBlock;

/**
 * The console loop: poll config and recent trees every refresh, hold local
 * draft edits until an explicit apply, and keep the overhead readout in
 * sync with what actually arrived. All collector I/O goes through the
 * injected CollectorApi so the loop is testable without a browser.
 */
export class ConsoleApp {
  state: ConsoleState;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private api: CollectorApi,
    host: string,
    private onRender: (state: ConsoleState) => void = () => {},
    private windowSize = 20,
  ) {
    this.state = {
      host,
      remote: defaultBlock(),
      draft: defaultBlock(),
      dirty: false,
      revision: null,
      lastAppliedRevision: null,
      trees: [],
      readout: null,
      stale: false,
      problems: [],
      error: null,
    };
  }

  /** One refresh cycle; never writes to the collector. */
  async tick(): Promise<void> {
    const state = this.state;
    try {
      const [config, trees] = await Promise.all([
        this.api.getConfig(state.host),
        this.api.listTrees({ limit: 50 }),
      ]);
      state.revision = config.revision;
      state.remote = config.block;
      if (!state.dirty) {
        state.draft = clone(config.block);
      }
      state.trees = trees;
      state.readout = overheadReadout(trees, this.windowSize);
      state.stale = false;
      state.error = null;
    } catch (err) {
      state.stale = true; // keep showing the last data, marked stale
      state.error = err instanceof Error ? err.message : String(err);
    }
    this.onRender(state);
  }

  async setHost(host: string): Promise<void> {
    this.state.host = host;
    this.state.dirty = false;
    await this.tick();
  }

  // -- draft edits (local until apply) -------------------------------------

  private edit(mutate: (draft: ControlBlock) => void): void {
    mutate(this.state.draft);
    this.state.dirty = true;
    this.state.problems = validateBlock(this.state.draft);
    this.onRender(this.state);
  }

  setGlobalEnabled(on: boolean): void {
    this.edit((draft) => {
      draft.global_enabled = on;
    });
  }

  toggleMetric(name: string, on: boolean): void {
    this.edit((draft) => {
      const set = new Set(draft.enabled_metrics);
      if (on) {
        set.add(name);
      } else {
        set.delete(name);
        set.delete("*"); // an explicit off ends wildcard mode
      }
      draft.enabled_metrics = [...set].sort();
    });
  }

  setOverride(target: string, value: OverrideValue | null): void {
    this.edit((draft) => {
      if (value === null) {
        delete draft.target_overrides[target];
      } else {
        draft.target_overrides[target] = value;
      }
    });
  }

  setSampleRate(rate: number): void {
    this.edit((draft) => {
      draft.sample_rate = rate;
    });
  }

  setConciseThresholdUs(us: number): void {
    this.edit((draft) => {
      draft.concise_threshold_us = us;
    });
  }

  discardDraft(): void {
    this.state.draft = clone(this.state.remote);
    this.state.dirty = false;
    this.state.problems = [];
    this.onRender(this.state);
  }

  /** PUT the draft; the only call that mutates collector state. */
  async apply(): Promise<number | null> {
    const state = this.state;
    state.problems = validateBlock(state.draft);
    if (state.problems.length) {
      this.onRender(state);
      return null;
    }
    try {
      const { revision } = await this.api.putConfig(state.host, state.draft);
      state.lastAppliedRevision = revision;
      state.revision = revision;
      state.remote = clone(state.draft);
      state.dirty = false;
      state.error = null;
      this.onRender(state);
      return revision;
    } catch (err) {
      state.error = err instanceof Error ? err.message : String(err);
      this.onRender(state);
      return null;
    }
  }

  start(intervalMs = 2000): void {
    this.stop();
    void this.tick();
    this.timer = setInterval(() => void this.tick(), intervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }
}
