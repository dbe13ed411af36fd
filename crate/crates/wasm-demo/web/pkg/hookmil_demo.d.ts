/* tslint:disable */
/* eslint-disable */

/**
 * One hook round on a random bag.
 */
export class HookView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Hook → instance attention, K×N row-major.
     */
    readonly attention: Float64Array;
    readonly diversity: number;
    /**
     * Instance → hook attention, N×K row-major.
     */
    readonly feedback: Float64Array;
    readonly hooks: number;
    readonly instances: number;
    readonly rank: number;
    /**
     * Singular values of the induced N×N dependency, descending.
     */
    readonly singular_values: Float64Array;
}

/**
 * Diversity penalty for `k` hook logit rows that share a common component
 * with weight `collapse` ∈ [0, 1]: 0 gives independent rows, 1 identical
 * rows. Returns `[loss, S_00, S_01, ...]` with the K×K similarity matrix.
 */
export function diversity_explorer(k: number, n: number, collapse: number, seed: bigint): Float64Array;

/**
 * Random bag of `n` instances in `d` dimensions through a block with `k`
 * hooks drawn at `hook_std`. `clusters` > 0 places instances around that many
 * centres so the attention maps show structure.
 */
export function hook_view(n: number, k: number, d: number, hook_std: number, clusters: number, seed: bigint): HookView;

/**
 * `[‖Diag(p) − ppᵀ‖₂, p_0, p_1, ...]` for `p = softmax(logits / temperature)`.
 */
export function jacobian_norm(logits: Float64Array, temperature: number): Float64Array;

/**
 * The bound stated in the published analysis, for display next to the
 * measured value.
 */
export function published_jacobian_bound(): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_hookview_free: (a: number, b: number) => void;
    readonly diversity_explorer: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly hook_view: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
    readonly hookview_attention: (a: number) => [number, number];
    readonly hookview_diversity: (a: number) => number;
    readonly hookview_feedback: (a: number) => [number, number];
    readonly hookview_hooks: (a: number) => number;
    readonly hookview_instances: (a: number) => number;
    readonly hookview_rank: (a: number) => number;
    readonly hookview_singular_values: (a: number) => [number, number];
    readonly jacobian_norm: (a: number, b: number, c: number) => [number, number, number, number];
    readonly published_jacobian_bound: () => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
