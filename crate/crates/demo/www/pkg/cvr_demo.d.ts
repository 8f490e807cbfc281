/* tslint:disable */
/* eslint-disable */

/**
 * Built-in inputs: `reference`, `dedup`, `three_bug` or `agents`.
 */
export function builtin(name: string): string;

/**
 * Runs every strategy over seeds `first..=last` and returns per-strategy
 * medians plus the per-seed rows.
 */
export function compare_strategies(scenario_json: string, first: number, last: number): string;

/**
 * Simulates a scenario and reports how its crashes were grouped by patch.
 */
export function dedup_replay(scenario_json: string, seed: number): string;

/**
 * Lane plan for a JSON list of agent profiles.
 */
export function plan_lanes(agents_json: string, num_lanes: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly builtin: (a: number, b: number) => [number, number, number, number];
    readonly compare_strategies: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly dedup_replay: (a: number, b: number, c: number) => [number, number, number, number];
    readonly plan_lanes: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
