/* tslint:disable */
/* eslint-disable */

/**
 * Decoding distribution over the first `logits` entries (padded with a
 * very low logit up to the vocabulary size): plain softmax and the
 * temperature/nucleus distribution actually sampled from.
 */
export function decoding_distribution(logits: string, temperature: number, top_p: number): string;

/**
 * Draws a toy pool and a balanced selection from it; reports per-label
 * counts in the pool, in the selection and in the first `n` pool items.
 */
export function sampler_coverage(pool_size: number, n: number, min_fraction: number, penalty: number, seed: bigint): string;

/**
 * Parses `text` and scores it against the comma-separated `gold` labels
 * with both rewards. The collapse window starts empty.
 */
export function score_completion(text: string, gold: string, min_length_tokens: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly decoding_distribution: (a: number, b: number, c: number, d: number) => [number, number];
    readonly sampler_coverage: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
    readonly score_completion: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
