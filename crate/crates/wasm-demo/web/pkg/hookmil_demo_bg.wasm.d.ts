/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_hookview_free: (a: number, b: number) => void;
export const diversity_explorer: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const hook_view: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
export const hookview_attention: (a: number) => [number, number];
export const hookview_diversity: (a: number) => number;
export const hookview_feedback: (a: number) => [number, number];
export const hookview_hooks: (a: number) => number;
export const hookview_instances: (a: number) => number;
export const hookview_rank: (a: number) => number;
export const hookview_singular_values: (a: number) => [number, number];
export const jacobian_norm: (a: number, b: number, c: number) => [number, number, number, number];
export const published_jacobian_bound: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
