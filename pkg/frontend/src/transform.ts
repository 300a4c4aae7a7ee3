// Plane-to-pixel mapping: uniform scale, proximity (y) rightward,
// height (z) upward. Canvas pixel y grows downward, hence the flip.

export interface Pixel {
  x: number
  y: number
}

export interface PlanePoint {
  y: number
  z: number
}

export class PlaneTransform {
  constructor(
    readonly scale: number, // pixels per meter, > 0
    readonly originX: number, // pixel x of plane (0, 0)
    readonly originY: number, // pixel y of plane (0, 0)
  ) {
    if (!(scale > 0)) throw new Error(`scale must be positive, got ${scale}`)
  }

  // largest uniform scale that fits the half-extents into the canvas
  static fit(
    width: number,
    height: number,
    halfY: number,
    halfZ: number,
  ): PlaneTransform {
    const scale = Math.min(width / (2 * halfY), height / (2 * halfZ))
    return new PlaneTransform(scale, width / 2, height / 2)
  }

  toPixel(point: PlanePoint): Pixel {
    return {
      x: this.originX + point.y * this.scale,
      y: this.originY - point.z * this.scale,
    }
  }

  toPlane(pixel: Pixel): PlanePoint {
    return {
      y: (pixel.x - this.originX) / this.scale,
      z: (this.originY - pixel.y) / this.scale,
    }
  }
}
