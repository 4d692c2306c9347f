/* tslint:disable */
/* eslint-disable */

/**
 * Dataset, model and training state held by the page.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Category by expert activation table as JSON.
     */
    activation(): string;
    /**
     * Top `k` prompts for eval query `index`, model and baseline side by side.
     */
    compare(index: number, k: number): string;
    /**
     * Generates a dataset and an untrained model. `use_label = false` gives
     * the image-only prompt fusion.
     */
    constructor(seed: number, use_label: boolean);
    /**
     * Current metrics without training.
     */
    status(): string;
    /**
     * Runs `epochs` more epochs and returns the loss curve and metrics as JSON.
     */
    train(epochs: number): string;
    readonly eval_queries: number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_activation: (a: number) => [number, number, number, number];
    readonly demo_compare: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_eval_queries: (a: number) => number;
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_status: (a: number) => [number, number, number, number];
    readonly demo_train: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
