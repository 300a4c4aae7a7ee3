import type { LeaderSample } from './messages.js'
import type { PlaneTransform, Pixel } from './transform.js'
import type { ViewConfig } from './state.js'

// Turns pointer pixels into leader samples: inverse transform, clamp to
// the workspace box, rate-limit to one message per client tick.
export class PointerEmitter {
  private lastEmit = -Infinity
  private lastT = -Infinity

  constructor(
    private readonly transform: PlaneTransform,
    private readonly config: ViewConfig,
  ) {}

  pointerToLeader(pixel: Pixel, nowSeconds: number): LeaderSample | null {
    const period = 1 / this.config.tickHz
    if (nowSeconds - this.lastEmit < period) return null
    this.lastEmit = nowSeconds
    const { workspace } = this.config
    const plane = this.transform.toPlane(pixel)
    const y = Math.min(workspace.yMax, Math.max(workspace.yMin, plane.y))
    const z = Math.min(workspace.zMax, Math.max(workspace.zMin, plane.z))
    // service requires strictly increasing timestamps
    const t = Math.max(nowSeconds, this.lastT + period / 2)
    this.lastT = t
    return { type: 'leader', t, y, z }
  }
}
