import { describe, expect, it } from "vitest";

import { decodeRgb8, makePayload, PayloadError, toRgba } from "../src/imaging.js";

describe("payload decoding", () => {
  it("round-trips rgb bytes", () => {
    const rgb = new Uint8Array([0, 127, 255, 10, 20, 30]);
    const payload = makePayload(2, 1, rgb);
    expect(Array.from(decodeRgb8(payload))).toEqual(Array.from(rgb));
  });

  it("rejects payloads whose length disagrees with the geometry", () => {
    const payload = makePayload(2, 1, new Uint8Array([1, 2, 3, 4, 5, 6]));
    const lying = { ...payload, width: 4 };
    expect(() => decodeRgb8(lying)).toThrow(PayloadError);
  });

  it("expands to opaque rgba", () => {
    const payload = makePayload(1, 1, new Uint8Array([7, 8, 9]));
    expect(Array.from(toRgba(payload))).toEqual([7, 8, 9, 255]);
  });
});
