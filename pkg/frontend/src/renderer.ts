import type { PlaneTransform } from './transform.js'
import type { ViewState } from './state.js'

// The slice of CanvasRenderingContext2D the renderer needs; tests supply
// a recording implementation, the browser passes the real context.
export interface Draw2D {
  fillStyle: string
  strokeStyle: string
  lineWidth: number
  font: string
  globalAlpha: number
  clearRect(x: number, y: number, w: number, h: number): void
  fillRect(x: number, y: number, w: number, h: number): void
  beginPath(): void
  moveTo(x: number, y: number): void
  lineTo(x: number, y: number): void
  stroke(): void
  arc(x: number, y: number, r: number, a0: number, a1: number): void
  fill(): void
  fillText(text: string, x: number, y: number): void
}

export const COLORS = {
  background: '#11151c',
  grid: '#2a3240',
  handoverGlyph: '#8fa3bf',
  leader: '#4aa3ff',
  follower: '#ffb347',
  target: '#7ddc7d',
  badgeOther: '#5a6472',
  badgeHandover: '#2e9e4f',
  text: '#e8edf4',
}

function polyline(ctx: Draw2D, points: { x: number; y: number }[]): void {
  if (points.length < 2) return
  ctx.beginPath()
  ctx.moveTo(points[0].x, points[0].y)
  for (let i = 1; i < points.length; i++) ctx.lineTo(points[i].x, points[i].y)
  ctx.stroke()
}

function marker(ctx: Draw2D, x: number, y: number, r: number,
                color: string): void {
  ctx.fillStyle = color
  ctx.beginPath()
  ctx.arc(x, y, r, 0, 2 * Math.PI)
  ctx.fill()
}

export function renderFrame(
  ctx: Draw2D,
  state: ViewState,
  transform: PlaneTransform,
  width: number,
  height: number,
): void {
  ctx.globalAlpha = 1
  ctx.clearRect(0, 0, width, height)
  ctx.fillStyle = COLORS.background
  ctx.fillRect(0, 0, width, height)

  // axes through the handover point
  const origin = transform.toPixel({ y: 0, z: 0 })
  ctx.strokeStyle = COLORS.grid
  ctx.lineWidth = 1
  polyline(ctx, [
    { x: 0, y: origin.y },
    { x: width, y: origin.y },
  ])
  polyline(ctx, [
    { x: origin.x, y: 0 },
    { x: origin.x, y: height },
  ])

  // handover point glyph: small diamond at the plane origin
  ctx.strokeStyle = COLORS.handoverGlyph
  ctx.lineWidth = 1.5
  const g = 7
  polyline(ctx, [
    { x: origin.x, y: origin.y - g },
    { x: origin.x + g, y: origin.y },
    { x: origin.x, y: origin.y + g },
    { x: origin.x - g, y: origin.y },
    { x: origin.x, y: origin.y - g },
  ])

  // trails (last trailSeconds of motion)
  ctx.lineWidth = 2
  ctx.globalAlpha = 0.55
  ctx.strokeStyle = COLORS.leader
  polyline(ctx, state.leaderTrail.points().map((p) => transform.toPixel(p)))
  ctx.strokeStyle = COLORS.follower
  polyline(ctx, state.followerTrail.points().map((p) => transform.toPixel(p)))
  ctx.globalAlpha = 1

  // inferred target cross
  if (state.target) {
    const t = transform.toPixel(state.target)
    ctx.strokeStyle = COLORS.target
    ctx.lineWidth = 1.5
    polyline(ctx, [
      { x: t.x - 6, y: t.y },
      { x: t.x + 6, y: t.y },
    ])
    polyline(ctx, [
      { x: t.x, y: t.y - 6 },
      { x: t.x, y: t.y + 6 },
    ])
  }

  // markers; the follower dims while the feed is stale
  if (state.leader) {
    const p = transform.toPixel(state.leader)
    marker(ctx, p.x, p.y, 8, COLORS.leader)
  }
  if (state.follower) {
    const p = transform.toPixel(state.follower)
    ctx.globalAlpha = state.stale ? 0.35 : 1
    marker(ctx, p.x, p.y, 8, COLORS.follower)
    ctx.globalAlpha = 1
  }

  // intent badge
  ctx.fillStyle =
    state.intent === 'handover' ? COLORS.badgeHandover : COLORS.badgeOther
  ctx.fillRect(10, 10, 110, 26)
  ctx.fillStyle = COLORS.text
  ctx.font = '13px sans-serif'
  ctx.fillText(state.intent.toUpperCase(), 18, 28)
  if (state.stale) ctx.fillText('stale', 130, 28)
  if (state.connection !== 'open') ctx.fillText(state.connection, 10, height - 12)
  if (state.droppedMessages > 0)
    ctx.fillText(`dropped: ${state.droppedMessages}`, 10, height - 30)
}
