/** Orbit camera with rate-limited smoothing.
 *
 * Input events move a target state; tick() advances the emitted state
 * toward it exponentially and clamps the combined angular step, so
 * consecutive emitted poses never differ by more than the configured
 * rotation cap.  Orientation is a function of (azimuth, elevation) alone:
 * zooming and flying translate eye and look-target together, contributing
 * no rotation, which is what makes the cap a hard guarantee.
 */

export interface CameraOptions {
  center?: [number, number, number];
  radius?: number;
  azimuthDeg?: number;
  elevationDeg?: number;
  /** Hard per-tick rotation bound, degrees. */
  maxStepDeg?: number;
  /** Fraction of the remaining distance covered per tick, in (0, 1]. */
  smoothing?: number;
  dragDegPerPx?: number;
  minRadius?: number;
}

const DEG = Math.PI / 180;
const MAX_ELEVATION = 85 * DEG;
const SNAP = 1e-9;

function wrapPi(a: number): number {
  while (a > Math.PI) a -= 2 * Math.PI;
  while (a < -Math.PI) a += 2 * Math.PI;
  return a;
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, v));
}

export class OrbitCamera {
  private az: number;
  private el: number;
  private radius: number;
  private center: [number, number, number];
  private azT: number;
  private elT: number;
  private radiusT: number;
  private centerT: [number, number, number];
  private readonly capRad: number;
  private readonly lambda: number;
  private readonly dragRad: number;
  private readonly minRadius: number;

  constructor(opts: CameraOptions = {}) {
    this.az = (opts.azimuthDeg ?? 0) * DEG;
    this.el = clamp((opts.elevationDeg ?? 20) * DEG, -MAX_ELEVATION, MAX_ELEVATION);
    this.radius = opts.radius ?? 3;
    this.center = [...(opts.center ?? [0, 0, 0])] as [number, number, number];
    this.azT = this.az;
    this.elT = this.el;
    this.radiusT = this.radius;
    this.centerT = [...this.center] as [number, number, number];
    this.capRad = (opts.maxStepDeg ?? 5) * DEG;
    this.lambda = opts.smoothing ?? 0.35;
    this.dragRad = (opts.dragDegPerPx ?? 0.3) * DEG;
    this.minRadius = opts.minRadius ?? 0.2;
  }

  /** Mouse drag in pixels: orbit the target angles. */
  drag(dxPx: number, dyPx: number): void {
    this.azT = wrapPi(this.azT - dxPx * this.dragRad);
    this.elT = clamp(this.elT + dyPx * this.dragRad, -MAX_ELEVATION, MAX_ELEVATION);
  }

  /** Wheel zoom; positive delta moves away. */
  wheel(delta: number): void {
    this.radiusT = Math.max(this.minRadius, this.radiusT * Math.exp(delta * 0.1));
  }

  /** Translate the look target (and with it the eye) in camera axes. */
  fly(rightward: number, downward: number, forward: number): void {
    const [right, down, fwd] = this.axes(this.azT, this.elT);
    for (let i = 0; i < 3; i++) {
      this.centerT[i] +=
        rightward * right[i] + downward * down[i] + forward * fwd[i];
    }
  }

  /** Advance one tick and return the row-major 4x4 camera-to-world matrix. */
  tick(): number[] {
    let dAz = wrapPi(this.azT - this.az) * this.lambda;
    let dEl = (this.elT - this.el) * this.lambda;
    // Azimuth rotates the frame about world z, elevation about the camera's
    // right axis; the composed rotation angle is at most |dAz| + |dEl|.
    const mag = Math.abs(dAz) + Math.abs(dEl);
    if (mag > this.capRad) {
      dAz *= this.capRad / mag;
      dEl *= this.capRad / mag;
    }
    this.az = wrapPi(this.az + dAz);
    this.el = clamp(this.el + dEl, -MAX_ELEVATION, MAX_ELEVATION);
    this.radius += (this.radiusT - this.radius) * this.lambda;
    for (let i = 0; i < 3; i++) {
      this.center[i] += (this.centerT[i] - this.center[i]) * this.lambda;
    }
    if (Math.abs(wrapPi(this.azT - this.az)) < SNAP) this.az = this.azT;
    if (Math.abs(this.elT - this.el) < SNAP) this.el = this.elT;
    if (Math.abs(this.radiusT - this.radius) < SNAP) this.radius = this.radiusT;
    for (let i = 0; i < 3; i++) {
      if (Math.abs(this.centerT[i] - this.center[i]) < SNAP) {
        this.center[i] = this.centerT[i];
      }
    }
    return this.matrix();
  }

  /** Current emitted pose without advancing the smoother. */
  matrix(): number[] {
    const [right, down, fwd] = this.axes(this.az, this.el);
    const eye = [
      this.center[0] - this.radius * fwd[0],
      this.center[1] - this.radius * fwd[1],
      this.center[2] - this.radius * fwd[2],
    ];
    // Columns are the camera axes (x right, y down in image, z forward)
    // and the eye position; z-up world.
    return [
      right[0], down[0], fwd[0], eye[0],
      right[1], down[1], fwd[1], eye[1],
      right[2], down[2], fwd[2], eye[2],
      0, 0, 0, 1,
    ];
  }

  private axes(az: number, el: number): [number[], number[], number[]] {
    const fwd = [
      -Math.cos(az) * Math.cos(el),
      -Math.sin(az) * Math.cos(el),
      -Math.sin(el),
    ];
    // right = normalize(fwd x up), up = +z; unit because fwd has
    // horizontal norm cos(el) and el stays away from the poles.
    const horiz = Math.cos(el);
    const right = [fwd[1] / horiz, -fwd[0] / horiz, 0];
    const down = [
      fwd[1] * right[2] - fwd[2] * right[1],
      fwd[2] * right[0] - fwd[0] * right[2],
      fwd[0] * right[1] - fwd[1] * right[0],
    ];
    return [right, down, fwd];
  }
}

/** Rotation angle in radians between two row-major 4x4 camera matrices. */
export function rotationBetween(a: ArrayLike<number>, b: ArrayLike<number>): number {
  // trace(Ra^T Rb) over the 3x3 blocks; columns live at stride 4.
  let tr = 0;
  for (let col = 0; col < 3; col++) {
    for (let row = 0; row < 3; row++) {
      tr += a[row * 4 + col] * b[row * 4 + col];
    }
  }
  return Math.acos(clamp((tr - 1) / 2, -1, 1));
}
