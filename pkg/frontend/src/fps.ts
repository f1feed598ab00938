/** Exponential-moving-average frame rate and latency meter. */

export class FpsMeter {
  private emaMs: number | null = null;
  private lastStamp: number | null = null;

  constructor(private readonly alpha = 0.2) {}

  /** Record a frame arrival; `now` is a millisecond timestamp. */
  tick(now: number): void {
    if (this.lastStamp !== null) {
      const dt = now - this.lastStamp;
      this.emaMs = this.emaMs === null ? dt : this.alpha * dt + (1 - this.alpha) * this.emaMs;
    }
    this.lastStamp = now;
  }

  get fps(): number {
    if (this.emaMs === null || this.emaMs <= 0) return 0;
    return 1000 / this.emaMs;
  }

  reset(): void {
    this.emaMs = null;
    this.lastStamp = null;
  }
}
