import type { PlanePoint } from './transform.js'

// Bounded trail of recent plane points (capacity = seconds * tick rate).
export class TrailBuffer {
  private buffer: PlanePoint[] = []

  constructor(readonly capacity: number) {
    if (capacity < 1) throw new Error('capacity must be >= 1')
  }

  push(point: PlanePoint): void {
    this.buffer.push(point)
    if (this.buffer.length > this.capacity) this.buffer.shift()
  }

  get length(): number {
    return this.buffer.length
  }

  points(): readonly PlanePoint[] {
    return this.buffer
  }

  clear(): void {
    this.buffer = []
  }
}
