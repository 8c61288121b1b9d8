/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const bounds: (a: number, b: number, c: number) => [number, number];
export const dynamics: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
export const score: (a: number, b: number, c: number, d: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
