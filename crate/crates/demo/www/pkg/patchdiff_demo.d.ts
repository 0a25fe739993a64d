/* tslint:disable */
/* eslint-disable */

/**
 * An RGBA raster ready for `ImageData`.
 */
export class Picture {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    rgba(): Uint8Array;
    readonly height: number;
    readonly width: number;
}

/**
 * Optimal-denoiser outputs for one toy example across `timesteps`
 * (comma separated), laid out left to right.
 */
export function oracle_blur(count: number, size: number, example: number, timesteps: string, seed: bigint): Picture;

/**
 * The noisy image at `t` followed by `samples` exact posterior draws.
 */
export function posterior_samples(count: number, size: number, example: number, t: number, samples: number, seed: bigint): Picture;

/**
 * Per-timestep alpha_cum, log10 SNR and the x-space error amplification of
 * each prediction kind, as a JSON object of arrays.
 */
export function schedule_curves(steps: number, beta_1: number, beta_t: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_picture_free: (a: number, b: number) => void;
    readonly oracle_blur: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
    readonly picture_height: (a: number) => number;
    readonly picture_rgba: (a: number) => [number, number];
    readonly picture_width: (a: number) => number;
    readonly posterior_samples: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
    readonly schedule_curves: (a: number, b: number, c: number) => [number, number, number, number];
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
