import { decodeMessage, FollowerCommand } from './messages.js'
import { TrailBuffer } from './trails.js'
import type { PlanePoint } from './transform.js'

export type ConnectionStatus = 'connecting' | 'open' | 'closed'

export interface ViewConfig {
  tickHz: number
  trailSeconds: number
  workspace: { yMin: number; yMax: number; zMin: number; zMax: number }
}

export const DEFAULT_VIEW: ViewConfig = {
  tickHz: 50,
  trailSeconds: 5,
  workspace: { yMin: -0.75, yMax: 0.75, zMin: -0.55, zMax: 0.55 },
}

// All data the renderer needs for one frame. Inbound lines mutate it;
// the UI itself only ever mutates simulation state through leader
// samples and reset messages.
export class ViewState {
  leader: PlanePoint | null = null
  follower: PlanePoint | null = null
  target: PlanePoint | null = null
  intent: 'handover' | 'other' = 'other'
  stale = false
  connection: ConnectionStatus = 'connecting'
  modelVersion: string | null = null
  lastError: string | null = null
  droppedMessages = 0
  readonly leaderTrail: TrailBuffer
  readonly followerTrail: TrailBuffer

  constructor(readonly config: ViewConfig = DEFAULT_VIEW) {
    const capacity = Math.round(config.trailSeconds * config.tickHz)
    this.leaderTrail = new TrailBuffer(capacity)
    this.followerTrail = new TrailBuffer(capacity)
  }

  applyLine(line: string): FollowerCommand | null {
    const msg = decodeMessage(line)
    if (msg === null) {
      this.droppedMessages += 1
      return null
    }
    switch (msg.type) {
      case 'follower': {
        this.follower = { y: msg.y, z: msg.z }
        this.target = { y: msg.target_y, z: msg.target_z }
        this.intent = msg.intent
        this.stale = msg.stale
        this.followerTrail.push(this.follower)
        return msg
      }
      case 'hello':
        this.modelVersion = msg.model_version
        return null
      case 'error':
        this.lastError = msg.message
        return null
      default:
        return null
    }
  }

  noteLeader(point: PlanePoint): void {
    this.leader = point
    this.leaderTrail.push(point)
  }

  resetMotion(): void {
    this.leader = null
    this.follower = null
    this.target = null
    this.intent = 'other'
    this.stale = false
    this.leaderTrail.clear()
    this.followerTrail.clear()
  }
}
