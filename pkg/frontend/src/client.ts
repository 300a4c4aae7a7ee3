import { encodeMessage, WireMessage } from './messages.js'
import type { ConnectionStatus } from './state.js'

// Minimal WebSocket surface so node tests can inject the `ws` package
// while the browser uses the native implementation.
export interface SocketLike {
  send(data: string): void
  close(): void
  addEventListener(type: string, handler: (event: any) => void): void
}

export type SocketFactory = (url: string) => SocketLike

export class StudioClient {
  status: ConnectionStatus = 'connecting'
  private socket: SocketLike

  constructor(
    url: string,
    private readonly onLine: (line: string) => void,
    private readonly onStatus: (status: ConnectionStatus) => void = () => {},
    factory: SocketFactory = (u) => new WebSocket(u) as unknown as SocketLike,
  ) {
    this.socket = factory(url)
    this.socket.addEventListener('open', () => this.setStatus('open'))
    this.socket.addEventListener('close', () => this.setStatus('closed'))
    this.socket.addEventListener('error', () => this.setStatus('closed'))
    this.socket.addEventListener('message', (event: any) => {
      const data = typeof event.data === 'string'
        ? event.data
        : event.data.toString('utf-8')
      for (const line of data.split('\n')) {
        if (line.trim().length > 0) this.onLine(line)
      }
    })
  }

  private setStatus(status: ConnectionStatus): void {
    this.status = status
    this.onStatus(status)
  }

  // returns false when disconnected: the sample is dropped, not queued
  send(msg: WireMessage): boolean {
    if (this.status !== 'open') return false
    this.socket.send(encodeMessage(msg))
    return true
  }

  reset(): boolean {
    return this.send({ type: 'reset' })
  }

  close(): void {
    this.socket.close()
  }
}
