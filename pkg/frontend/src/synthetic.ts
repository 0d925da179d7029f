/**
 * Synthetic source: procedural moving-shapes frames in [0,1] f32, plus a
 * paced pump that respects the session's in-flight cap and a pause flag.
 */

import { StreamSession } from "./session.js";

/** Deterministic frame t of a drifting-blob clip, values in [0,1]. */
export function syntheticFrame(t: number, h: number, w: number): Float32Array {
  const out = new Float32Array(h * w * 3);
  const cx = (0.5 + 0.35 * Math.sin(t * 0.21)) * w;
  const cy = (0.5 + 0.35 * Math.cos(t * 0.13)) * h;
  const r = 0.18 * Math.min(h, w);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const i = (y * w + x) * 3;
      const d = Math.hypot(x - cx, y - cy);
      const blob = Math.max(0, 1 - d / r);
      out[i] = 0.15 + 0.7 * blob;
      out[i + 1] = 0.15 + 0.5 * Math.abs(Math.sin((x + t) * 0.08));
      out[i + 2] = 0.15 + 0.5 * Math.abs(Math.cos((y - t) * 0.08));
    }
  }
  return out;
}

export interface PumpOptions {
  fps: number;
  /** stop after this many frames; Infinity keeps going until stop() */
  maxFrames?: number;
  frameSource?: (t: number, h: number, w: number) => Float32Array;
  onDone?: () => void;
}

/** Sends frames at a fixed rate while the session has in-flight budget. */
export class FramePump {
  paused = false;
  sentByPump = 0;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(private session: StreamSession, private opts: PumpOptions) {}

  start(): void {
    if (this.timer !== null) return;
    const gen = this.opts.frameSource ?? syntheticFrame;
    const max = this.opts.maxFrames ?? Infinity;
    this.timer = setInterval(() => {
      if (this.paused) return;
      if (this.sentByPump >= max) {
        this.stop();
        this.opts.onDone?.();
        return;
      }
      const hello = this.session.hello;
      if (!hello) return;
      const frame = gen(this.sentByPump, hello.h, hello.w);
      if (this.session.sendFrame(frame)) this.sentByPump += 1;
      // cap reached: skip this tick, the budget refills on FRAME_OUT
    }, 1000 / this.opts.fps);
  }

  stop(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
  }
}
