import { StudioClient } from './client.js'
import { PointerEmitter } from './pointer.js'
import { renderFrame, Draw2D } from './renderer.js'
import { DEFAULT_VIEW, ViewState } from './state.js'
import { PlaneTransform } from './transform.js'

// Browser entry point: one canvas, one socket, one render loop.

function wsUrl(): string {
  const proto = location.protocol === 'https:' ? 'wss' : 'ws'
  return `${proto}://${location.host}/`
}

function start(): void {
  const canvas = document.getElementById('plane') as HTMLCanvasElement
  const statusEl = document.getElementById('status') as HTMLElement
  const resetButton = document.getElementById('reset') as HTMLButtonElement
  const ctx = canvas.getContext('2d') as unknown as Draw2D

  const state = new ViewState(DEFAULT_VIEW)
  const { workspace } = DEFAULT_VIEW
  const transform = PlaneTransform.fit(
    canvas.width,
    canvas.height,
    Math.max(Math.abs(workspace.yMin), workspace.yMax) * 1.05,
    Math.max(Math.abs(workspace.zMin), workspace.zMax) * 1.05,
  )
  const emitter = new PointerEmitter(transform, DEFAULT_VIEW)

  const client = new StudioClient(
    wsUrl(),
    (line) => state.applyLine(line),
    (status) => {
      state.connection = status
      statusEl.textContent =
        status === 'open'
          ? `connected${state.modelVersion ? ` (model ${state.modelVersion})` : ''}`
          : status
    },
  )

  let dragging = false
  const t0 = performance.now()

  function emitPointer(event: PointerEvent): void {
    const rect = canvas.getBoundingClientRect()
    const pixel = {
      x: ((event.clientX - rect.left) / rect.width) * canvas.width,
      y: ((event.clientY - rect.top) / rect.height) * canvas.height,
    }
    const sample = emitter.pointerToLeader(
      pixel,
      (performance.now() - t0) / 1000,
    )
    if (sample && client.send(sample)) {
      state.noteLeader({ y: sample.y, z: sample.z })
    }
  }

  canvas.addEventListener('pointerdown', (event) => {
    dragging = true
    canvas.setPointerCapture(event.pointerId)
    emitPointer(event)
  })
  canvas.addEventListener('pointermove', (event) => {
    if (dragging) emitPointer(event)
  })
  canvas.addEventListener('pointerup', () => {
    dragging = false
  })

  resetButton.addEventListener('click', () => {
    client.reset()
    state.resetMotion()
  })

  function frame(): void {
    renderFrame(ctx, state, transform, canvas.width, canvas.height)
    requestAnimationFrame(frame)
  }
  requestAnimationFrame(frame)
}

start()
