//! Reference paths and trajectories: wire format, localization of the
//! vehicle on the polyline, and generation of per-step reference values.

use std::f64::consts::PI;
use std::io::{Read, Write};

use thiserror::Error;

/// Number of header entries in the flat wire format.
pub const HEADER_LEN: usize = 6;
/// Number of entries per segment in the flat wire format.
pub const SEGMENT_LEN: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathType {
    Trajectory = 0,
    Path = 1,
    Circular = 2,
}

impl PathType {
    pub fn from_code(c: i64) -> Option<PathType> {
        match c {
            0 => Some(PathType::Trajectory),
            1 => Some(PathType::Path),
            2 => Some(PathType::Circular),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DriveMode {
    Standstill = 0,
    Forward = 1,
    Reverse = 2,
}

impl DriveMode {
    pub fn from_code(c: i64) -> Option<DriveMode> {
        match c {
            0 => Some(DriveMode::Standstill),
            1 => Some(DriveMode::Forward),
            2 => Some(DriveMode::Reverse),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// +1 forward, -1 reverse, 0 at standstill.
    pub fn sign(self) -> f64 {
        match self {
            DriveMode::Standstill => 0.0,
            DriveMode::Forward => 1.0,
            DriveMode::Reverse => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryHeader {
    /// Global time stamp, s.
    pub t: f64,
    /// Global root position, m.
    pub x: f64,
    pub y: f64,
    /// Rotation of the local frame, rad.
    pub phi: f64,
    pub ptype: PathType,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    /// Local passing time of the end node, s.
    pub t: f64,
    /// End node in the local frame, m.
    pub x: f64,
    pub y: f64,
    /// Segment angle against the local x-axis, rad.
    pub phi: f64,
    pub v: f64,
    pub a: f64,
    pub delta: f64,
    /// Sideslip reference; carried through but not used.
    pub beta: f64,
    pub mode: DriveMode,
    pub d_left: f64,
    pub d_right: f64,
}

impl Segment {
    /// Segment with a geometric heading and no corridor, timing or steering data.
    pub fn node(x: f64, y: f64, phi: f64, v: f64, mode: DriveMode, half_width: f64) -> Segment {
        Segment {
            t: 0.0,
            x,
            y,
            phi,
            v,
            a: 0.0,
            delta: 0.0,
            beta: 0.0,
            mode,
            d_left: half_width,
            d_right: half_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReferenceError {
    #[error("flat trajectory must hold {expected} values, got {found}")]
    BadLength { expected: usize, found: usize },
    #[error("segment count {0} outside 1..={1}")]
    BadSegmentCount(i64, usize),
    #[error("unknown path type {0}")]
    BadPtype(f64),
    #[error("unknown driving mode {value} in segment {segment}")]
    BadMode { segment: usize, value: f64 },
    #[error("negative reference speed in segment {0}")]
    NegativeRefSpeed(usize),
    #[error("non-finite value in field {field} of segment {segment} (0 = header)")]
    NonFiniteField { segment: usize, field: usize },
    #[error("no segment with driving mode {0:?} in the search window")]
    NoMatch(Option<DriveMode>),
    #[error("malformed trajectory file: {0}")]
    Format(String),
}

/// A validated reference path or trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    segments: Vec<Segment>,
    s_max: usize,
    /// Arc length from the root to each node; `cum[0] = 0`.
    cum: Vec<f64>,
}

fn round_code(v: f64) -> i64 {
    v.round() as i64
}

impl Trajectory {
    pub fn new(
        header: TrajectoryHeader,
        segments: Vec<Segment>,
        s_max: usize,
    ) -> Result<Trajectory, ReferenceError> {
        if segments.is_empty() || segments.len() > s_max {
            return Err(ReferenceError::BadSegmentCount(segments.len() as i64, s_max));
        }
        let h = [header.t, header.x, header.y, header.phi];
        if let Some(field) = h.iter().position(|v| !v.is_finite()) {
            return Err(ReferenceError::NonFiniteField { segment: 0, field });
        }
        for (i, s) in segments.iter().enumerate() {
            let vals = [s.t, s.x, s.y, s.phi, s.v, s.a, s.delta, s.beta, 0.0, s.d_left, s.d_right];
            if let Some(field) = vals.iter().position(|v| !v.is_finite()) {
                return Err(ReferenceError::NonFiniteField {
                    segment: i + 1,
                    field,
                });
            }
            if s.v < 0.0 {
                return Err(ReferenceError::NegativeRefSpeed(i + 1));
            }
        }
        let mut cum = Vec::with_capacity(segments.len() + 1);
        cum.push(0.0);
        let (mut px, mut py) = (0.0, 0.0);
        for s in &segments {
            let last = *cum.last().unwrap();
            cum.push(last + (s.x - px).hypot(s.y - py));
            px = s.x;
            py = s.y;
        }
        Ok(Trajectory {
            header,
            segments,
            s_max,
            cum,
        })
    }

    /// Parses the flat `6 + 11 * s_max` wire array. Integral fields are
    /// rounded to the nearest integer; entries past segment `S` are ignored.
    pub fn from_flat(raw: &[f64], s_max: usize) -> Result<Trajectory, ReferenceError> {
        let expected = HEADER_LEN + SEGMENT_LEN * s_max;
        if raw.len() != expected {
            return Err(ReferenceError::BadLength {
                expected,
                found: raw.len(),
            });
        }
        if !raw[5].is_finite() {
            return Err(ReferenceError::NonFiniteField { segment: 0, field: 5 });
        }
        let s = round_code(raw[5]);
        if s < 1 || s > s_max as i64 {
            return Err(ReferenceError::BadSegmentCount(s, s_max));
        }
        let ptype = if raw[4].is_finite() {
            PathType::from_code(round_code(raw[4]))
        } else {
            None
        }
        .ok_or(ReferenceError::BadPtype(raw[4]))?;
        let header = TrajectoryHeader {
            t: raw[0],
            x: raw[1],
            y: raw[2],
            phi: raw[3],
            ptype,
        };
        let segments = (0..s as usize)
            .map(|i| {
                let r = &raw[HEADER_LEN + SEGMENT_LEN * i..HEADER_LEN + SEGMENT_LEN * (i + 1)];
                let mode = if r[8].is_finite() {
                    DriveMode::from_code(round_code(r[8]))
                } else {
                    None
                }
                .ok_or(ReferenceError::BadMode {
                    segment: i + 1,
                    value: r[8],
                })?;
                Ok(Segment {
                    t: r[0],
                    x: r[1],
                    y: r[2],
                    phi: r[3],
                    v: r[4],
                    a: r[5],
                    delta: r[6],
                    beta: r[7],
                    mode,
                    d_left: r[9],
                    d_right: r[10],
                })
            })
            .collect::<Result<Vec<_>, ReferenceError>>()?;
        Trajectory::new(header, segments, s_max)
    }

    /// Serializes to the flat wire array; unused segment slots are zero.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![0.0; HEADER_LEN + SEGMENT_LEN * self.s_max];
        let h = &self.header;
        out[..HEADER_LEN].copy_from_slice(&[
            h.t,
            h.x,
            h.y,
            h.phi,
            h.ptype as i64 as f64,
            self.segments.len() as f64,
        ]);
        for (i, s) in self.segments.iter().enumerate() {
            let o = HEADER_LEN + SEGMENT_LEN * i;
            out[o..o + SEGMENT_LEN].copy_from_slice(&[
                s.t,
                s.x,
                s.y,
                s.phi,
                s.v,
                s.a,
                s.delta,
                s.beta,
                s.mode.code() as f64,
                s.d_left,
                s.d_right,
            ]);
        }
        out
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Segment by 1-based index.
    pub fn segment(&self, i: usize) -> &Segment {
        &self.segments[i - 1]
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    /// Start node of segment `i` (1-based) in the local frame.
    pub fn start_of(&self, i: usize) -> (f64, f64) {
        if i <= 1 {
            (0.0, 0.0)
        } else {
            let s = &self.segments[i - 2];
            (s.x, s.y)
        }
    }

    pub fn segment_length(&self, i: usize) -> f64 {
        self.cum[i] - self.cum[i - 1]
    }

    pub fn total_length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Arc length from the root to the point `s` metres into segment `seg`.
    pub fn arc_position(&self, seg: usize, s: f64) -> f64 {
        self.cum[seg - 1] + s
    }

    /// Local-frame point at parameter `s` along segment `seg`.
    pub fn point_on(&self, seg: usize, s: f64) -> (f64, f64) {
        let (ax, ay) = self.start_of(seg);
        let e = &self.segments[seg - 1];
        let len = self.segment_length(seg);
        if len <= 0.0 {
            return (e.x, e.y);
        }
        let f = s / len;
        (ax + f * (e.x - ax), ay + f * (e.y - ay))
    }

    /// Segments whose stored angle disagrees with their node geometry by more than `tol`.
    pub fn heading_mismatches(&self, tol: f64) -> Vec<usize> {
        (1..=self.len())
            .filter(|&i| {
                let (ax, ay) = self.start_of(i);
                let e = &self.segments[i - 1];
                if self.segment_length(i) <= 1e-12 {
                    return false;
                }
                let geo = (e.y - ay).atan2(e.x - ax);
                wrap_angle(geo - e.phi).abs() > tol
            })
            .collect()
    }

    /// Local frame to global frame.
    pub fn to_global(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.header.phi.sin_cos();
        (self.header.x + c * x - s * y, self.header.y + s * x + c * y)
    }

    /// Global frame to local frame.
    pub fn to_local(&self, gx: f64, gy: f64) -> (f64, f64) {
        let (s, c) = self.header.phi.sin_cos();
        let dx = gx - self.header.x;
        let dy = gy - self.header.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Arc length of the timed reference position at global time `now`.
    pub fn timed_arc_position(&self, now: f64) -> f64 {
        let tau = now - self.header.t;
        if tau <= 0.0 {
            return 0.0;
        }
        let mut t_prev = 0.0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.t >= tau {
                let span = s.t - t_prev;
                let f = if span > 0.0 { ((tau - t_prev) / span).clamp(0.0, 1.0) } else { 1.0 };
                return self.cum[i] + f * (self.cum[i + 1] - self.cum[i]);
            }
            t_prev = s.t;
        }
        self.total_length()
    }

    /// Local schedule time at which the timed reference reaches arc position `arc`.
    pub fn scheduled_time_at(&self, arc: f64) -> f64 {
        let mut t_prev = 0.0;
        for (i, s) in self.segments.iter().enumerate() {
            if arc <= self.cum[i + 1] {
                let len = self.cum[i + 1] - self.cum[i];
                let f = if len > 0.0 { ((arc - self.cum[i]) / len).clamp(0.0, 1.0) } else { 1.0 };
                return t_prev + f * (s.t - t_prev);
            }
            t_prev = s.t;
        }
        t_prev
    }

    /// Writes the human-readable CSV form.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ReferenceError> {
        let mut out = std::io::BufWriter::new(w);
        let io = |e: std::io::Error| ReferenceError::Format(e.to_string());
        writeln!(out, "# header: T,X,Y,Phi,Ptype,S").map_err(io)?;
        writeln!(out, "# segments: t,x,y,phi,v,a,delta,beta,D,d_left,d_right").map_err(io)?;
        let mut wr = csv::WriterBuilder::new().flexible(true).from_writer(out);
        let flat = self.to_flat();
        let csv_err = |e: csv::Error| ReferenceError::Format(e.to_string());
        wr.write_record(flat[..HEADER_LEN].iter().map(|v| format!("{v:?}")))
            .map_err(csv_err)?;
        for i in 0..self.len() {
            let o = HEADER_LEN + SEGMENT_LEN * i;
            wr.write_record(flat[o..o + SEGMENT_LEN].iter().map(|v| format!("{v:?}")))
                .map_err(csv_err)?;
        }
        wr.flush().map_err(io)
    }

    /// Reads the CSV form written by [`Trajectory::write_csv`].
    pub fn read_csv<R: Read>(r: R, s_max: usize) -> Result<Trajectory, ReferenceError> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .from_reader(r);
        let mut flat = vec![0.0; HEADER_LEN + SEGMENT_LEN * s_max];
        let mut nseg = 0usize;
        for (row, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| ReferenceError::Format(e.to_string()))?;
            let vals = rec
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ReferenceError::Format(format!("row {}: {e}", row + 1)))?;
            if row == 0 {
                if vals.len() != HEADER_LEN {
                    return Err(ReferenceError::Format("header row needs 6 values".into()));
                }
                flat[..HEADER_LEN].copy_from_slice(&vals);
            } else {
                if vals.len() != SEGMENT_LEN {
                    return Err(ReferenceError::Format(format!(
                        "segment row {row} needs 11 values"
                    )));
                }
                if nseg >= s_max {
                    return Err(ReferenceError::BadSegmentCount(nseg as i64 + 1, s_max));
                }
                let o = HEADER_LEN + SEGMENT_LEN * nseg;
                flat[o..o + SEGMENT_LEN].copy_from_slice(&vals);
                nseg += 1;
            }
        }
        Trajectory::from_flat(&flat, s_max)
    }
}

/// Validates a flat wire array into a [`Trajectory`].
pub fn validate_trajectory(raw: &[f64], s_max: usize) -> Result<Trajectory, ReferenceError> {
    Trajectory::from_flat(raw, s_max)
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    if w == -PI {
        PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    /// 1-based segment index.
    pub seg: usize,
    /// Distance from the segment start node, m.
    pub s: f64,
    /// Distance from the vehicle to its projection, m.
    pub dist: f64,
    /// Schedule error in seconds, positive when behind (trajectories only).
    pub lagging_time: f64,
}

/// Projection of `p` onto segment `seg`: (s, distance).
pub fn project_onto_segment(traj: &Trajectory, seg: usize, p: (f64, f64)) -> (f64, f64) {
    let (ax, ay) = traj.start_of(seg);
    let e = traj.segment(seg);
    let (dx, dy) = (e.x - ax, e.y - ay);
    let len = traj.segment_length(seg);
    if len <= 1e-12 {
        return (0.0, (p.0 - ax).hypot(p.1 - ay));
    }
    let s = (((p.0 - ax) * dx + (p.1 - ay) * dy) / len).clamp(0.0, len);
    let f = s / len;
    let (qx, qy) = (ax + f * dx, ay + f * dy);
    (s, (p.0 - qx).hypot(p.1 - qy))
}

/// First segment of the windowed scan.
pub fn scan_start(traj: &Trajectory, prev: Option<&Localization>, segsearch: usize) -> usize {
    let count = traj.len();
    match prev {
        None => 1,
        Some(p) => {
            let seg = p.seg.clamp(1, count);
            if traj.header.ptype == PathType::Circular {
                let back = segsearch % count;
                (seg + count - 1 - back) % count + 1
            } else {
                seg.saturating_sub(segsearch).max(1)
            }
        }
    }
}

/// Finds the closest point on the reference to the local-frame position
/// `pos`, near the previous localization.
///
/// The scan starts `segsearch` segments behind `prev` and walks forward until
/// `segsearch` consecutive examined segments fail to improve the minimum.
/// Segments whose driving mode differs from `mode_filter` are skipped.
pub fn localize(
    traj: &Trajectory,
    pos: (f64, f64),
    prev: Option<&Localization>,
    segsearch: usize,
    mode_filter: Option<DriveMode>,
) -> Result<Localization, ReferenceError> {
    let segsearch = segsearch.max(1);
    let count = traj.len();
    let circular = traj.header.ptype == PathType::Circular;
    let start = scan_start(traj, prev, segsearch);
    let span = if circular { count } else { count - start + 1 };

    let mut best: Option<Localization> = None;
    let mut stale = 0usize;
    for k in 0..span {
        let seg = (start - 1 + k) % count + 1;
        if let Some(mode) = mode_filter {
            if traj.segment(seg).mode != mode {
                continue;
            }
        }
        let (s, dist) = project_onto_segment(traj, seg, pos);
        match best {
            Some(b) if dist >= b.dist => {
                stale += 1;
                if stale >= segsearch {
                    break;
                }
            }
            _ => {
                best = Some(Localization {
                    seg,
                    s,
                    dist,
                    lagging_time: 0.0,
                });
                stale = 0;
            }
        }
    }
    best.ok_or(ReferenceError::NoMatch(mode_filter))
}

/// One entry of the reference sequence over the prediction horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefPoint {
    /// Global position, m.
    pub x: f64,
    pub y: f64,
    /// Global direction of travel along the path, rad.
    pub phi: f64,
    pub v: f64,
    pub a: f64,
    pub delta: f64,
    pub beta: f64,
    pub d_left: f64,
    pub d_right: f64,
    /// Driving mode of the hosting segment.
    pub mode: DriveMode,
    /// 1-based hosting segment.
    pub seg: usize,
}

impl RefPoint {
    /// The nine values in output order `x, y, phi, v, a, delta, beta, d_left, d_right`.
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.x,
            self.y,
            self.phi,
            self.v,
            self.a,
            self.delta,
            self.beta,
            self.d_left,
            self.d_right,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefGenParams {
    /// Prediction horizon N.
    pub horizon: usize,
    /// Sampling time, s.
    pub ts: f64,
    /// Catch-up time, s (trajectories only).
    pub cuptime: f64,
    /// Maximum relative modification of the reference speed.
    pub maxrefvelmod: f64,
}

/// Signed arc distance by which the vehicle trails the timed reference.
pub fn schedule_lag(traj: &Trajectory, loc: &Localization, now: f64) -> f64 {
    traj.timed_arc_position(now) - traj.arc_position(loc.seg, loc.s)
}

/// Schedule error in seconds, positive when the vehicle is behind.
pub fn lagging_time(traj: &Trajectory, loc: &Localization, now: f64) -> f64 {
    (now - traj.header.t) - traj.scheduled_time_at(traj.arc_position(loc.seg, loc.s))
}

fn effective_speed(v: f64, lag: Option<f64>, p: &RefGenParams) -> f64 {
    match lag {
        Some(ds) if p.cuptime > 0.0 => {
            let lo = v * (1.0 - p.maxrefvelmod).max(0.0);
            let hi = v * (1.0 + p.maxrefvelmod);
            (v + ds / p.cuptime).clamp(lo, hi)
        }
        _ => v,
    }
}

/// Marches along the reference from the localization point and returns
/// `p.horizon` reference points, one per prediction step.
///
/// Each step advances by the (possibly catch-up modified) speed of the
/// segment being traversed. The march freezes with zero speed at a
/// standstill segment, at the end of a run of segments sharing the starting
/// driving mode, or at the end of a non-circular reference. Circular
/// references wrap to the first segment.
pub fn generate_references(
    traj: &Trajectory,
    loc: &Localization,
    now: f64,
    p: &RefGenParams,
) -> Vec<RefPoint> {
    let count = traj.len();
    let circular = traj.header.ptype == PathType::Circular;
    let lag = (traj.header.ptype == PathType::Trajectory).then(|| schedule_lag(traj, loc, now));
    let run_mode = traj.segment(loc.seg.clamp(1, count)).mode;

    let mut seg = loc.seg.clamp(1, count);
    let mut s = loc.s.clamp(0.0, traj.segment_length(seg));
    let mut frozen = false;
    let mut out = Vec::with_capacity(p.horizon);

    for _ in 0..p.horizon {
        let mut remaining = p.ts;
        // bound the number of segment hops per step so degenerate
        // all-zero-length circular references cannot loop forever
        let mut hops = 0usize;
        while !frozen && remaining > 0.0 {
            let e = traj.segment(seg);
            let v = effective_speed(e.v, lag, p);
            if e.mode == DriveMode::Standstill || e.mode != run_mode || v <= 0.0 {
                frozen = true;
                break;
            }
            let len = traj.segment_length(seg);
            let left = len - s;
            if v * remaining <= left {
                s += v * remaining;
                break;
            }
            remaining -= left / v;
            let next = if seg == count {
                if circular {
                    Some(1)
                } else {
                    None
                }
            } else {
                Some(seg + 1)
            };
            hops += 1;
            match next {
                Some(n) if traj.segment(n).mode == run_mode && hops <= count => {
                    seg = n;
                    s = 0.0;
                }
                _ => {
                    s = len;
                    frozen = true;
                }
            }
        }
        let e = traj.segment(seg);
        let (lx, ly) = traj.point_on(seg, s);
        let (gx, gy) = traj.to_global(lx, ly);
        let (v, a) = if frozen {
            (0.0, 0.0)
        } else {
            (effective_speed(e.v, lag, p), e.a)
        };
        out.push(RefPoint {
            x: gx,
            y: gy,
            phi: e.phi + traj.header.phi,
            v,
            a,
            delta: e.delta,
            beta: e.beta,
            d_left: e.d_left,
            d_right: e.d_right,
            mode: e.mode,
            seg,
        });
    }
    out
}

/// Reference points that hold the vehicle at the current localization point
/// with zero speed.
pub fn stop_references(traj: &Trajectory, loc: &Localization, horizon: usize) -> Vec<RefPoint> {
    let seg = loc.seg.clamp(1, traj.len());
    let e = traj.segment(seg);
    let (lx, ly) = traj.point_on(seg, loc.s);
    let (gx, gy) = traj.to_global(lx, ly);
    vec![
        RefPoint {
            x: gx,
            y: gy,
            phi: e.phi + traj.header.phi,
            v: 0.0,
            a: 0.0,
            delta: e.delta,
            beta: e.beta,
            d_left: e.d_left,
            d_right: e.d_right,
            mode: e.mode,
            seg,
        };
        horizon
    ]
}
