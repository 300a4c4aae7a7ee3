// Wire schema: one JSON object per newline-terminated line, identical to
// the service's TCP protocol. Unknown fields are ignored; malformed or
// unknown-typed lines decode to null so callers can count drops.

export interface LeaderSample {
  type: 'leader'
  t: number
  y: number
  z: number
}

export interface FollowerCommand {
  type: 'follower'
  t: number
  y: number
  z: number
  vy: number
  vz: number
  intent: 'handover' | 'other'
  target_y: number
  target_z: number
  stale: boolean
}

export interface Hello {
  type: 'hello'
  model_version: string
}

export interface ResetMessage {
  type: 'reset'
}

export interface ErrorReply {
  type: 'error'
  message: string
}

export type WireMessage =
  | LeaderSample
  | FollowerCommand
  | Hello
  | ResetMessage
  | ErrorReply

function finiteNumber(value: unknown): value is number {
  return typeof value === 'number' && Number.isFinite(value)
}

export function decodeMessage(line: string): WireMessage | null {
  let raw: unknown
  try {
    raw = JSON.parse(line)
  } catch {
    return null
  }
  if (typeof raw !== 'object' || raw === null) return null
  const obj = raw as Record<string, unknown>
  switch (obj.type) {
    case 'leader':
      if (!finiteNumber(obj.t) || !finiteNumber(obj.y) || !finiteNumber(obj.z))
        return null
      return { type: 'leader', t: obj.t, y: obj.y, z: obj.z }
    case 'follower': {
      const keys = ['t', 'y', 'z', 'vy', 'vz', 'target_y', 'target_z'] as const
      for (const key of keys) if (!finiteNumber(obj[key])) return null
      const intent = obj.intent === 'handover' ? 'handover' : 'other'
      return {
        type: 'follower',
        t: obj.t as number,
        y: obj.y as number,
        z: obj.z as number,
        vy: obj.vy as number,
        vz: obj.vz as number,
        intent,
        target_y: obj.target_y as number,
        target_z: obj.target_z as number,
        stale: obj.stale === true,
      }
    }
    case 'hello':
      if (typeof obj.model_version !== 'string') return null
      return { type: 'hello', model_version: obj.model_version }
    case 'reset':
      return { type: 'reset' }
    case 'error':
      return { type: 'error', message: String(obj.message ?? '') }
    default:
      return null
  }
}

export function encodeMessage(msg: WireMessage): string {
  return JSON.stringify(msg) + '\n'
}
