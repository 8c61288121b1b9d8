/* tslint:disable */
/* eslint-disable */

/**
 * Runs every bound check on `trials` random instances.
 */
export function bounds(trials: number, seed: number, gamma: number): string;

/**
 * Optimal values and greedy arrows for a grid and its perturbed copy.
 */
export function dynamics(width: number, height: number, slip: number, mismatch: number, gamma: number, seed: number): string;

/**
 * Trains classifiers and a scorer on a small grid pair.
 */
export function score(source_slip: number, delta: number, steps: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly bounds: (a: number, b: number, c: number) => [number, number];
    readonly dynamics: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly score: (a: number, b: number, c: number, d: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
