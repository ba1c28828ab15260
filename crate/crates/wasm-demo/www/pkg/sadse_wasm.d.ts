/* tslint:disable */
/* eslint-disable */

export function blobLabels(n_clusters: number, points_per: number): Uint32Array;

export function blobs(n_clusters: number, points_per: number, separation: number, noise: number, seed: number): Float64Array;

export function kmeans(points: Float64Array, n_clusters: number, seed: number): Uint32Array;

export function lassoEdges(points: Float64Array, lambda: number, neighbors: number): Uint32Array;

export function spectral(points: Float64Array, n_clusters: number, sigma: number, seed: number): Uint32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly blobLabels: (a: number, b: number) => [number, number];
    readonly blobs: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly kmeans: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly lassoEdges: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly spectral: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
