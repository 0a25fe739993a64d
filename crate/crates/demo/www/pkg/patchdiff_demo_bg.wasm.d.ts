/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_picture_free: (a: number, b: number) => void;
export const oracle_blur: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
export const picture_height: (a: number) => number;
export const picture_rgba: (a: number) => [number, number];
export const picture_width: (a: number) => number;
export const posterior_samples: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
export const schedule_curves: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
