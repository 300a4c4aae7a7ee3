// End-to-end against the real service: a scripted pointer replay drives
// the intent flip and follower convergence; the rendered follower path
// must match the exported session CSV within one pixel; the pointer ->
// marker round trip stays within three service ticks.
import { spawn, ChildProcess } from 'node:child_process'
import { mkdtempSync, readFileSync, writeFileSync } from 'node:fs'
import { tmpdir } from 'node:os'
import { join } from 'node:path'
import WebSocket from 'ws'
import { afterAll, beforeAll, describe, expect, it } from 'vitest'

import { FollowerCommand, encodeMessage } from '../src/messages.js'
import { PointerEmitter } from '../src/pointer.js'
import { COLORS, renderFrame } from '../src/renderer.js'
import { DEFAULT_VIEW, ViewState } from '../src/state.js'
import { PlaneTransform } from '../src/transform.js'
import { RecordingDraw } from './recording.js'

const PYTHON = process.env.PYTHON ?? 'python3'
const TICK_HZ = 50
const TICK = 1 / TICK_HZ

let bundleDir: string
let service: ChildProcess
let wsPort: number

function run(args: string[]): Promise<void> {
  return new Promise((resolve, reject) => {
    const proc = spawn(PYTHON, args, { stdio: ['ignore', 'pipe', 'pipe'] })
    let err = ''
    proc.stderr!.on('data', (chunk) => (err += chunk))
    proc.on('exit', (code) =>
      code === 0 ? resolve() : reject(new Error(`${args[1]}: ${err}`)),
    )
  })
}

beforeAll(async () => {
  bundleDir = mkdtempSync(join(tmpdir(), 'studio-bundle-'))
  await run([
    '-m', 'handover_cds', 'train', '--synthetic', '16', '--seed', '101',
    '--out', bundleDir,
  ])
  service = spawn(
    PYTHON,
    ['-m', 'handover_cds', 'serve', '--models', bundleDir,
     '--ws-listen', '127.0.0.1:0'],
    { stdio: ['ignore', 'pipe', 'pipe'] },
  )
  wsPort = await new Promise<number>((resolve, reject) => {
    let out = ''
    service.stdout!.on('data', (chunk) => {
      out += chunk
      const match = /ws=[\d.]+:(\d+)/.exec(out)
      if (match) resolve(Number(match[1]))
    })
    service.on('exit', () => reject(new Error(`service died: ${out}`)))
  })
})

afterAll(() => {
  service?.kill()
})

function minimumJerk(tau: number): number {
  return 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5
}

interface SessionRun {
  commands: FollowerCommand[]
  latencySeconds: number
}

// Scripted pointer path through the real pointer pipeline: a handover
// reach from the demo start region to the handover point, then a hold.
async function runScriptedSession(): Promise<SessionRun> {
  const transform = PlaneTransform.fit(900, 660, 0.8, 0.6)
  const emitter = new PointerEmitter(transform, DEFAULT_VIEW)
  const start = { y: 0.47, z: 0.13 }
  const reachTicks = Math.round(2.2 * TICK_HZ)
  const holdTicks = Math.round(3.0 * TICK_HZ)

  const ws = new WebSocket(`ws://127.0.0.1:${wsPort}/`)
  const commands: FollowerCommand[] = []
  let firstReactive = -1
  const sentAt: number[] = []

  const opened = new Promise<void>((resolve, reject) => {
    ws.on('open', () => resolve())
    ws.on('error', reject)
  })
  ws.on('message', (data) => {
    const state = stateSink
    const cmd = state.applyLine(data.toString())
    if (cmd) {
      commands.push(cmd)
      if (firstReactive < 0 && Math.abs(cmd.target_y) > 0.2) {
        firstReactive = performance.now()
      }
    }
  })
  const stateSink = new ViewState(DEFAULT_VIEW)
  await opened

  const tSend0 = performance.now()
  for (let i = 0; i <= reachTicks + holdTicks; i++) {
    const tau = Math.min(1, i / reachTicks)
    const s = minimumJerk(tau)
    const plane = {
      y: start.y * (1 - s),
      z: start.z * (1 - s),
    }
    const pixel = transform.toPixel(plane)
    const sample = emitter.pointerToLeader(pixel, (i + 1) * TICK)
    if (sample) {
      ws.send(encodeMessage(sample))
      sentAt.push(performance.now())
      stateSink.noteLeader({ y: sample.y, z: sample.z })
    }
    await new Promise((resolve) => setTimeout(resolve, 1000 * TICK))
  }
  // allow the last ticks to arrive
  await new Promise((resolve) => setTimeout(resolve, 200))
  ws.close()

  return {
    commands,
    latencySeconds: (firstReactive - tSend0) / 1000,
    state: stateSink,
  } as SessionRun & { state: ViewState }
}

let session: SessionRun & { state?: ViewState }

describe('scripted pointer replay', () => {
  beforeAll(async () => {
    session = await runScriptedSession()
  })

  it('flips intent to handover exactly once', () => {
    const intents = session.commands.map((c) => c.intent)
    const ups = intents.filter(
      (intent, i) => i > 0 && intents[i - 1] === 'other' && intent === 'handover',
    ).length
    expect(ups).toBe(1)
  })

  it('drives the follower marker to the handover point', () => {
    const last = session.commands[session.commands.length - 1]
    expect(Math.hypot(last.y, last.z)).toBeLessThan(0.01)
  })

  it('pointer-to-marker round trip within three service ticks', () => {
    expect(session.latencySeconds).toBeGreaterThan(0)
    expect(session.latencySeconds).toBeLessThanOrEqual(3 * TICK)
  })

  it('rendered follower path matches the session CSV within 1 px', () => {
    // export the session the way the harness writes per-step CSVs
    const csvPath = join(bundleDir, 'session.csv')
    const lines = ['t,y,z']
    for (const cmd of session.commands) {
      lines.push(`${cmd.t},${cmd.y},${cmd.z}`)
    }
    writeFileSync(csvPath, lines.join('\n') + '\n')

    // render the final frame from the accumulated view state
    const transform = PlaneTransform.fit(900, 660, 0.8, 0.6)
    const ctx = new RecordingDraw()
    renderFrame(ctx, session.state!, transform, 900, 660)
    const trail = ctx.strokes
      .filter((s) => s.strokeStyle === COLORS.follower)
      .sort((a, b) => b.points.length - a.points.length)[0]
    expect(trail).toBeDefined()

    const rows = readFileSync(csvPath, 'utf-8')
      .trim()
      .split('\n')
      .slice(1)
      .map((line) => line.split(',').map(Number))
    const tail = rows.slice(-trail.points.length)
    expect(tail.length).toBe(trail.points.length)
    for (let i = 0; i < tail.length; i++) {
      const expected = transform.toPixel({ y: tail[i][1], z: tail[i][2] })
      expect(Math.abs(trail.points[i].x - expected.x)).toBeLessThanOrEqual(1)
      expect(Math.abs(trail.points[i].y - expected.y)).toBeLessThanOrEqual(1)
    }
  })

  it('reset returns the follower to rest', async () => {
    const ws = new WebSocket(`ws://127.0.0.1:${wsPort}/`)
    await new Promise<void>((resolve) => ws.on('open', () => resolve()))
    const first = await new Promise<string>((resolve) =>
      ws.once('message', (data) => resolve(data.toString())),
    )
    ws.send(encodeMessage({ type: 'reset' }))
    await new Promise((resolve) => setTimeout(resolve, 100))
    const after = await new Promise<string>((resolve) =>
      ws.once('message', (data) => resolve(data.toString())),
    )
    ws.close()
    const state = new ViewState()
    state.applyLine(first)
    const rest = { ...state.follower! }
    state.applyLine(after)
    expect(state.follower!.y).toBeCloseTo(rest.y, 9)
    expect(state.follower!.z).toBeCloseTo(rest.z, 9)
  })
})
