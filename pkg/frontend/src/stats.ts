/** Rolling one-second means over the server's per-frame telemetry. */

import type { StatsMessage } from "./protocol.js";

export interface StatsMeans {
  fps: number;
  samplesPerRay: number;
  guidedFraction: number;
  msVolume: number;
  msWarp: number;
  msNn: number;
  bufferLen: number;
  count: number;
}

interface Sample {
  at: number;
  stats: StatsMessage;
}

export class RollingStats {
  private samples: Sample[] = [];

  constructor(private readonly windowMs = 1000) {}

  push(stats: StatsMessage, nowMs: number): void {
    this.samples.push({ at: nowMs, stats });
    this.evict(nowMs);
  }

  /** Means over samples in (now - window, now]; null while empty. */
  means(nowMs: number): StatsMeans | null {
    this.evict(nowMs);
    const n = this.samples.length;
    if (n === 0) {
      return null;
    }
    const acc = {
      fps: 0, samplesPerRay: 0, guidedFraction: 0,
      msVolume: 0, msWarp: 0, msNn: 0, bufferLen: 0,
    };
    for (const { stats } of this.samples) {
      acc.fps += stats.fps;
      acc.samplesPerRay += stats.samples_per_ray;
      acc.guidedFraction += stats.guided_fraction;
      acc.msVolume += stats.ms_volume;
      acc.msWarp += stats.ms_warp;
      acc.msNn += stats.ms_nn;
      acc.bufferLen += stats.buffer_len;
    }
    return {
      fps: acc.fps / n,
      samplesPerRay: acc.samplesPerRay / n,
      guidedFraction: acc.guidedFraction / n,
      msVolume: acc.msVolume / n,
      msWarp: acc.msWarp / n,
      msNn: acc.msNn / n,
      bufferLen: acc.bufferLen / n,
      count: n,
    };
  }

  private evict(nowMs: number): void {
    const cutoff = nowMs - this.windowMs;
    let drop = 0;
    while (drop < this.samples.length && this.samples[drop].at <= cutoff) {
      drop++;
    }
    if (drop > 0) {
      this.samples.splice(0, drop);
    }
  }
}
