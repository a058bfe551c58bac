import { describe, expect, it } from "vitest";

import { AnnotationState } from "../src/annotate.js";
import { swapPairs } from "../src/dragback.js";

describe("AnnotationState", () => {
  it("blocks submission while a handle lacks a target", () => {
    const a = new AnnotationState();
    a.imageLoaded = true;
    a.addClick(4, 8);
    expect(a.validate()).toMatch(/handle 1 has no target/);
    a.addClick(10, 8);
    expect(a.validate()).toBeNull();
    a.addClick(5, 5); // opens a second, unpaired handle
    expect(a.validate()).toMatch(/handle 2 has no target/);
  });

  it("requires an image and at least one pair", () => {
    const a = new AnnotationState();
    expect(a.validate()).toMatch(/image/);
    a.imageLoaded = true;
    expect(a.validate()).toMatch(/at least one/);
  });

  it("brush then erase-all yields the 'all' mask payload", () => {
    const a = new AnnotationState();
    a.paint(10, 10, 3, 1);
    expect(a.maskMode()).toBe("painted");
    a.eraseMask();
    expect(a.maskMode()).toBe("all");
  });

  it("points payload is ordered px,py,gx,gy", () => {
    const a = new AnnotationState();
    a.imageLoaded = true;
    a.addClick(4, 8);
    a.addClick(10, 9);
    expect(a.pointsPayload()).toEqual([[4, 8, 10, 9]]);
  });
});

describe("drag-back swap", () => {
  it("produces exactly reversed pairs", () => {
    expect(swapPairs([[4, 8, 10, 9], [1, 2, 3, 4]]))
      .toEqual([[10, 9, 4, 8], [3, 4, 1, 2]]);
    const twice = swapPairs(swapPairs([[4, 8, 10, 9]]));
    expect(twice).toEqual([[4, 8, 10, 9]]);
  });
});
