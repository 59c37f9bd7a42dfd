/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const coefficientCurve: (a: number, b: number) => [number, number, number, number];
export const collapseTrace: (a: number, b: number, c: bigint, d: number) => [number, number, number, number];
export const toyDirections: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
