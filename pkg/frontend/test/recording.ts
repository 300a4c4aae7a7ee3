// Recording Draw2D stub: captures stroked polylines and state changes so
// tests can assert on exactly what would reach the canvas.
import type { Draw2D } from '../src/renderer.js'

export interface StrokedPath {
  strokeStyle: string
  globalAlpha: number
  points: { x: number; y: number }[]
}

export interface FilledArc {
  fillStyle: string
  globalAlpha: number
  x: number
  y: number
  r: number
}

export class RecordingDraw implements Draw2D {
  fillStyle = ''
  strokeStyle = ''
  lineWidth = 1
  font = ''
  globalAlpha = 1

  strokes: StrokedPath[] = []
  arcs: FilledArc[] = []
  rects: { fillStyle: string; x: number; y: number; w: number; h: number }[] =
    []
  texts: { text: string; x: number; y: number }[] = []

  private path: { x: number; y: number }[] = []
  private pendingArc: { x: number; y: number; r: number } | null = null

  clearRect(): void {}

  fillRect(x: number, y: number, w: number, h: number): void {
    this.rects.push({ fillStyle: this.fillStyle, x, y, w, h })
  }

  beginPath(): void {
    this.path = []
    this.pendingArc = null
  }

  moveTo(x: number, y: number): void {
    this.path.push({ x, y })
  }

  lineTo(x: number, y: number): void {
    this.path.push({ x, y })
  }

  stroke(): void {
    this.strokes.push({
      strokeStyle: this.strokeStyle,
      globalAlpha: this.globalAlpha,
      points: [...this.path],
    })
  }

  arc(x: number, y: number, r: number): void {
    this.pendingArc = { x, y, r }
  }

  fill(): void {
    if (this.pendingArc) {
      this.arcs.push({
        fillStyle: this.fillStyle,
        globalAlpha: this.globalAlpha,
        ...this.pendingArc,
      })
      this.pendingArc = null
    }
  }

  fillText(text: string, x: number, y: number): void {
    this.texts.push({ text, x, y })
  }
}
