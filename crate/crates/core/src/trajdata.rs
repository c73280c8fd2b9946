//! GPS trajectory ingestion and preprocessing.
//!
//! Stages run in a fixed order: PLT parsing, local planar projection with
//! uniform resampling, pedestrian speed filtering, stationarity segmentation,
//! and finally differencing into fixed-length windows.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveTime};
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdn::{FeatureWindow, MixtureParams, StepTarget, Vec2, WindowSet, WINDOW_STEPS};
use crate::rng;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
const PLT_HEADER_LINES: usize = 6;
/// Positions needed for one window plus its target.
pub const MIN_WINDOW_SAMPLES: usize = WINDOW_STEPS + 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsPoint {
    pub lat: f64,
    pub lon: f64,
    /// Feet, as recorded; unused downstream.
    pub altitude: f64,
    /// Seconds since the Unix epoch.
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub source: String,
    pub points: Vec<GpsPoint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PltParse {
    /// Pieces of the file with strictly increasing timestamps.
    pub trajectories: Vec<RawTrajectory>,
    pub records: usize,
    pub skipped: usize,
}

fn parse_record(line: &str) -> Option<GpsPoint> {
    let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if fields.len() != 7 {
        return None;
    }
    let lat: f64 = fields[0].parse().ok()?;
    let lon: f64 = fields[1].parse().ok()?;
    fields[2].parse::<f64>().ok()?;
    let altitude: f64 = fields[3].parse().ok()?;
    fields[4].parse::<f64>().ok()?;
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return None;
    }
    let date = NaiveDate::parse_from_str(fields[5], "%Y-%m-%d").ok()?;
    let time = NaiveTime::parse_from_str(fields[6], "%H:%M:%S").ok()?;
    let time = date.and_time(time).and_utc().timestamp() as f64;
    Some(GpsPoint {
        lat,
        lon,
        altitude,
        time,
    })
}

/// Parses one Geolife `.plt` file: six header lines, then
/// `lat,lon,0,altitude_ft,days_since_1899,YYYY-MM-DD,HH:MM:SS` records.
///
/// Malformed records are skipped and counted; a timestamp that does not
/// increase starts a new trajectory.
pub fn parse_plt(content: &str, source: &str) -> PltParse {
    let mut out = PltParse::default();
    let mut current: Vec<GpsPoint> = Vec::new();
    for line in content.lines().skip(PLT_HEADER_LINES) {
        if line.trim().is_empty() {
            continue;
        }
        out.records += 1;
        let Some(p) = parse_record(line) else {
            out.skipped += 1;
            continue;
        };
        if let Some(last) = current.last() {
            if p.time <= last.time {
                out.trajectories.push(RawTrajectory {
                    source: source.to_string(),
                    points: std::mem::take(&mut current),
                });
            }
        }
        current.push(p);
    }
    if out.skipped > 0 {
        warn!("{source}: skipped {} malformed records", out.skipped);
    }
    if !current.is_empty() || out.trajectories.is_empty() {
        out.trajectories.push(RawTrajectory {
            source: source.to_string(),
            points: current,
        });
    }
    out
}

/// Uniform-rate positions in a local planar frame (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    pub id: u64,
    pub parent: String,
    pub interval_s: f64,
    pub positions: Vec<Vec2>,
}

impl TrajectorySegment {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn deltas(&self) -> Vec<Vec2> {
        self.positions
            .windows(2)
            .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
            .collect()
    }

    fn sub(&self, start: usize, end: usize) -> TrajectorySegment {
        TrajectorySegment {
            id: self.id,
            parent: self.parent.clone(),
            interval_s: self.interval_s,
            positions: self.positions[start..end].to_vec(),
        }
    }
}

/// Equirectangular projection about `(lat0, lon0)`.
pub fn project(lat0: f64, lon0: f64, lat: f64, lon: f64) -> Vec2 {
    [
        EARTH_RADIUS_M * (lon - lon0).to_radians() * lat0.to_radians().cos(),
        EARTH_RADIUS_M * (lat - lat0).to_radians(),
    ]
}

/// Projects about the first point, splits at time gaps longer than
/// `gap_factor * interval_s`, and linearly interpolates each piece onto a
/// uniform grid starting at its first timestamp.
pub fn project_and_resample(raw: &RawTrajectory, interval_s: f64, gap_factor: f64) -> Result<Vec<TrajectorySegment>> {
    if !(interval_s > 0.0) {
        return Err(Error::invalid("resampling interval must be positive"));
    }
    if raw.points.len() < 2 {
        return Ok(Vec::new());
    }
    let (lat0, lon0) = (raw.points[0].lat, raw.points[0].lon);
    let projected: Vec<(f64, Vec2)> = raw
        .points
        .iter()
        .map(|p| (p.time, project(lat0, lon0, p.lat, p.lon)))
        .collect();

    let mut pieces: Vec<&[(f64, Vec2)]> = Vec::new();
    let mut start = 0;
    for i in 1..projected.len() {
        if projected[i].0 - projected[i - 1].0 > gap_factor * interval_s {
            pieces.push(&projected[start..i]);
            start = i;
        }
    }
    pieces.push(&projected[start..]);

    let mut out = Vec::new();
    for piece in pieces {
        if piece.len() < 2 {
            continue;
        }
        let t0 = piece[0].0;
        let t_end = piece[piece.len() - 1].0;
        let mut positions = Vec::new();
        let mut j = 0;
        let mut k = 0usize;
        loop {
            let t = t0 + k as f64 * interval_s;
            if t > t_end + 1e-9 {
                break;
            }
            while j + 1 < piece.len() - 1 && piece[j + 1].0 < t {
                j += 1;
            }
            let (ta, pa) = piece[j];
            let (tb, pb) = piece[j + 1];
            let w = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
            positions.push([pa[0] + w * (pb[0] - pa[0]), pa[1] + w * (pb[1] - pa[1])]);
            k += 1;
        }
        out.push(TrajectorySegment {
            id: 0,
            parent: raw.source.clone(),
            interval_s,
            positions,
        });
    }
    Ok(out)
}

/// Linear-interpolated percentile (`q` in `[0, 1]`) of an unsorted sample.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// Keeps a segment unless the `percentile` quantile of its per-step speeds exceeds `vmax_mps`.
pub fn speed_filter(segment: &TrajectorySegment, vmax_mps: f64, percentile_q: f64) -> bool {
    let mut speeds: Vec<f64> = segment
        .deltas()
        .iter()
        .map(|d| d[0].hypot(d[1]) / segment.interval_s)
        .collect();
    if speeds.is_empty() {
        return true;
    }
    percentile(&mut speeds, percentile_q) <= vmax_mps
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationarityConfig {
    /// Maximum split-half mean gap, in pooled standard deviations.
    pub mean_gap: f64,
    pub var_ratio_min: f64,
    pub var_ratio_max: f64,
    /// Fraction of emitted segments that must pass before splitting stops.
    pub target_pass_rate: f64,
    /// Failing segments shorter than this are discarded rather than split.
    pub min_len: usize,
}

impl Default for StationarityConfig {
    fn default() -> Self {
        StationarityConfig {
            mean_gap: 0.5,
            var_ratio_min: 0.5,
            var_ratio_max: 2.0,
            target_pass_rate: 0.92,
            min_len: 64,
        }
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn halves_agree(series: &[f64], cfg: &StationarityConfig) -> bool {
    if series.len() < 4 {
        return true;
    }
    let (a, b) = series.split_at(series.len() / 2);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let pooled = ((va + vb) / 2.0).sqrt();
    let scale = ma.abs().max(mb.abs()).max(1.0);
    if pooled <= 1e-12 * scale {
        return (ma - mb).abs() <= 1e-12 * scale;
    }
    if (ma - mb).abs() >= cfg.mean_gap * pooled {
        return false;
    }
    let ratio = if vb == 0.0 { f64::INFINITY } else { va / vb };
    (cfg.var_ratio_min..=cfg.var_ratio_max).contains(&ratio)
}

/// Split-half stationarity heuristic on the differenced X and Y series.
pub fn is_stationary(segment: &TrajectorySegment, cfg: &StationarityConfig) -> bool {
    let deltas = segment.deltas();
    let xs: Vec<f64> = deltas.iter().map(|d| d[0]).collect();
    let ys: Vec<f64> = deltas.iter().map(|d| d[1]).collect();
    halves_agree(&xs, cfg) && halves_agree(&ys, cfg)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Segmentation {
    pub segments: Vec<TrajectorySegment>,
    /// Pass rate over the input segments, before any split.
    pub initial_pass_rate: f64,
    /// Pass rate over the emitted segments.
    pub pass_rate: f64,
    pub dropped: usize,
}

/// Bisects failing segments in rounds until the pass rate over all current
/// segments reaches the target. Failing segments shorter than the minimum
/// length are discarded.
pub fn segment_for_stationarity(input: Vec<TrajectorySegment>, cfg: &StationarityConfig) -> Segmentation {
    let rate = |segs: &[(TrajectorySegment, bool)]| {
        if segs.is_empty() {
            1.0
        } else {
            segs.iter().filter(|(_, p)| *p).count() as f64 / segs.len() as f64
        }
    };
    let mut current: Vec<(TrajectorySegment, bool)> = input
        .into_iter()
        .map(|s| {
            let pass = is_stationary(&s, cfg);
            (s, pass)
        })
        .collect();
    let initial_pass_rate = rate(&current);
    let mut dropped = 0;
    loop {
        let below_target = rate(&current) < cfg.target_pass_rate;
        let mut next = Vec::with_capacity(current.len());
        let mut changed = false;
        for (seg, pass) in current {
            if pass {
                next.push((seg, pass));
            } else if seg.len() < cfg.min_len {
                dropped += 1;
                changed = true;
            } else if below_target {
                let mid = seg.len() / 2;
                for half in [seg.sub(0, mid + 1), seg.sub(mid, seg.len())] {
                    let p = is_stationary(&half, cfg);
                    next.push((half, p));
                }
                changed = true;
            } else {
                next.push((seg, pass));
            }
        }
        current = next;
        if !changed {
            break;
        }
    }
    Segmentation {
        pass_rate: rate(&current),
        segments: current.into_iter().map(|(s, _)| s).collect(),
        initial_pass_rate,
        dropped,
    }
}

/// Stride-1 windows of 32 displacements, each paired with the following one.
pub fn make_windows(segment: &TrajectorySegment) -> Vec<(FeatureWindow, StepTarget)> {
    let deltas = segment.deltas();
    if deltas.len() <= WINDOW_STEPS {
        return Vec::new();
    }
    (0..deltas.len() - WINDOW_STEPS)
        .map(|i| {
            let w = FeatureWindow::from_deltas(&deltas[i..i + WINDOW_STEPS]).expect("finite positions");
            (w, deltas[i + WINDOW_STEPS])
        })
        .collect()
}

/// All windows of all segments as one matrix set.
pub fn window_set(segments: &[TrajectorySegment]) -> Result<WindowSet> {
    let pairs: Vec<_> = segments.iter().flat_map(make_windows).collect();
    WindowSet::from_pairs(&pairs)
}

/// Accumulates iid displacement draws from `kernel`, starting at `start`.
pub fn synthesize_trajectory<R: Rng + ?Sized>(
    kernel: &MixtureParams,
    steps: usize,
    start: Vec2,
    interval_s: f64,
    rng: &mut R,
) -> TrajectorySegment {
    let mut positions = Vec::with_capacity(steps + 1);
    positions.push(start);
    let mut p = start;
    for _ in 0..steps {
        let d = kernel.sample(rng);
        p = [p[0] + d[0], p[1] + d[1]];
        positions.push(p);
    }
    TrajectorySegment {
        id: 0,
        parent: "synthetic".into(),
        interval_s,
        positions,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub training: Vec<TrajectorySegment>,
    pub validation: Vec<TrajectorySegment>,
    pub train_fraction: f64,
}

/// Seeded shuffle, then the first `round(fraction * n)` segments train.
pub fn split_dataset(segments: Vec<TrajectorySegment>, train_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid("train fraction must lie in [0, 1]"));
    }
    let mut segments = segments;
    segments.shuffle(&mut rng::stream(seed, 0x5350_4c54, 0));
    let n_train = (train_fraction * segments.len() as f64).round() as usize;
    let validation = segments.split_off(n_train);
    Ok(DatasetSplit {
        training: segments,
        validation,
        train_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub resample_interval_s: f64,
    pub gap_factor: f64,
    pub vmax_mps: f64,
    pub speed_percentile: f64,
    pub stationarity: StationarityConfig,
    pub train_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            resample_interval_s: 60.0,
            gap_factor: 5.0,
            vmax_mps: 2.5,
            speed_percentile: 0.95,
            stationarity: StationarityConfig::default(),
            train_fraction: 0.9,
        }
    }
}

/// Stage statistics written next to a processed dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub files: usize,
    pub records: usize,
    pub records_skipped: usize,
    pub trajectories: usize,
    pub resampled_segments: usize,
    pub speed_dropped: usize,
    pub stationarity_initial_pass_rate: f64,
    pub stationarity_pass_rate: f64,
    pub stationarity_dropped: usize,
    pub short_dropped: usize,
    pub segments: usize,
    pub windows: usize,
}

/// Runs every stage over `(source_name, plt_content)` inputs.
pub fn run_pipeline(files: &[(String, String)], cfg: &PipelineConfig) -> Result<(Vec<TrajectorySegment>, Manifest)> {
    let mut manifest = Manifest {
        files: files.len(),
        ..Manifest::default()
    };
    let mut resampled = Vec::new();
    for (name, content) in files {
        let parsed = parse_plt(content, name);
        manifest.records += parsed.records;
        manifest.records_skipped += parsed.skipped;
        for raw in parsed.trajectories.iter().filter(|t| !t.points.is_empty()) {
            manifest.trajectories += 1;
            resampled.extend(project_and_resample(raw, cfg.resample_interval_s, cfg.gap_factor)?);
        }
    }
    manifest.resampled_segments = resampled.len();
    let before = resampled.len();
    let walking: Vec<_> = resampled
        .into_iter()
        .filter(|s| speed_filter(s, cfg.vmax_mps, cfg.speed_percentile))
        .collect();
    manifest.speed_dropped = before - walking.len();
    let seg = segment_for_stationarity(walking, &cfg.stationarity);
    manifest.stationarity_initial_pass_rate = seg.initial_pass_rate;
    manifest.stationarity_pass_rate = seg.pass_rate;
    manifest.stationarity_dropped = seg.dropped;
    let before = seg.segments.len();
    let mut segments: Vec<_> = seg
        .segments
        .into_iter()
        .filter(|s| s.len() >= MIN_WINDOW_SAMPLES)
        .collect();
    manifest.short_dropped = before - segments.len();
    for (i, s) in segments.iter_mut().enumerate() {
        s.id = i as u64;
    }
    manifest.segments = segments.len();
    manifest.windows = segments.iter().map(|s| s.len() + 1 - MIN_WINDOW_SAMPLES).sum();
    Ok((segments, manifest))
}

/// Every `.plt` file under `dir`, sorted by path.
pub fn find_plt_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("plt")) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes segments as CSV: `segment_id,parent,interval_s,n_points` followed by
/// `x0,y0,x1,y1,...` on the same row.
pub fn write_dataset<W: Write>(w: W, segments: &[TrajectorySegment]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().flexible(true).from_writer(w);
    wr.write_record(["segment_id", "parent", "interval_s", "n_points", "positions"])
        .map_err(csv_err)?;
    for s in segments {
        let mut rec = vec![
            s.id.to_string(),
            s.parent.clone(),
            s.interval_s.to_string(),
            s.positions.len().to_string(),
        ];
        rec.extend(s.positions.iter().flat_map(|p| [p[0].to_string(), p[1].to_string()]));
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_dataset<R: std::io::Read>(r: R) -> Result<Vec<TrajectorySegment>> {
    let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let bad = |what: &str| Error::Data(format!("dataset row {}: {what}", line + 1));
        if rec.len() < 4 {
            return Err(bad("too few fields"));
        }
        let id: u64 = rec[0].parse().map_err(|_| bad("segment_id"))?;
        let interval_s: f64 = rec[2].parse().map_err(|_| bad("interval_s"))?;
        let n: usize = rec[3].parse().map_err(|_| bad("n_points"))?;
        if rec.len() != 4 + 2 * n {
            return Err(bad("position count does not match n_points"));
        }
        let coords = (4..rec.len())
            .map(|i| rec[i].parse::<f64>().map_err(|_| bad("coordinate")))
            .collect::<Result<Vec<_>>>()?;
        out.push(TrajectorySegment {
            id,
            parent: rec[1].to_string(),
            interval_s,
            positions: coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    const HEADER: &str = "Geolife trajectory\nWGS 84\nAltitude is in Feet\nReserved 3\n0,2,255,My Track,0,0,2,8421376\n0\n";

    fn seg(positions: Vec<Vec2>) -> TrajectorySegment {
        TrajectorySegment {
            id: 0,
            parent: "t".into(),
            interval_s: 1.0,
            positions,
        }
    }

    fn from_deltas(deltas: &[Vec2]) -> TrajectorySegment {
        let mut p = [0.0, 0.0];
        let mut pos = vec![p];
        for d in deltas {
            p = [p[0] + d[0], p[1] + d[1]];
            pos.push(p);
        }
        seg(pos)
    }

    fn white_noise(n: usize, seed: u64) -> Vec<Vec2> {
        let mut r = rng::seeded(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| [nd.sample(&mut r), nd.sample(&mut r)]).collect()
    }

    #[test]
    fn parse_header_only() {
        let p = parse_plt(HEADER, "f");
        assert_eq!(p.trajectories.len(), 1);
        assert!(p.trajectories[0].points.is_empty());
        assert_eq!(p.skipped, 0);
    }

    #[test]
    fn parse_single_record() {
        let text = format!("{HEADER}39.9,116.3,0,164,39744.12,2008-10-23,02:53:04\n");
        let p = parse_plt(&text, "f");
        let pt = p.trajectories[0].points[0];
        assert_eq!(pt.lat, 39.9);
        assert_eq!(pt.lon, 116.3);
        assert_eq!(pt.altitude, 164.0);
    }

    #[test]
    fn parse_timestamps_and_errors() {
        let text = format!(
            "{HEADER}39.9,116.3,0,164,39744.12,2008-10-23,02:53:04\n\
             garbage line\n\
             39.9,116.3,0,164,39744.12,2008-10-23,02:53:06\n\
             99.9,116.3,0,164,39744.12,2008-10-23,02:53:07\n\
             39.9,116.3,0,164,39744.12,2008-10-23,02:53:01\n"
        );
        let p = parse_plt(&text, "f");
        assert_eq!(p.skipped, 2);
        assert_eq!(p.records, 5);
        assert_eq!(p.trajectories.len(), 2);
        let pts = &p.trajectories[0].points;
        assert_eq!(pts[1].time - pts[0].time, 2.0);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project(39.9, 116.3, 39.9, 116.3), [0.0, 0.0]);
        let d = project(10.0, 50.0, 11.0, 50.0);
        assert!((d[1] - 111_194.926_644_558_7).abs() < 1e-6);
        assert!(d[0].abs() < 1e-9);
    }

    fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
        let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
        let dp = p2 - p1;
        let dl = (lon2 - lon1).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * a.sqrt().asin()
    }

    #[test]
    fn projection_preserves_city_scale_distances() {
        let mut r = rng::seeded(5);
        let (lat0, lon0) = (39.9, 116.3);
        // A 10 km box is ~0.09 deg of latitude and ~0.117 deg of longitude here.
        for _ in 0..500 {
            let (a, b, c, d): (f64, f64, f64, f64) = (r.random(), r.random(), r.random(), r.random());
            let (la1, lo1) = (lat0 + 0.09 * a, lon0 + 0.117 * b);
            let (la2, lo2) = (lat0 + 0.09 * c, lon0 + 0.117 * d);
            let truth = haversine(la1, lo1, la2, lo2);
            if truth < 100.0 {
                continue;
            }
            let p = project(lat0, lon0, la1, lo1);
            let q = project(lat0, lon0, la2, lo2);
            let planar = (p[0] - q[0]).hypot(p[1] - q[1]);
            assert!((planar - truth).abs() / truth < 0.005, "{planar} vs {truth}");
        }
    }

    fn raw(points: &[(f64, f64, f64)]) -> RawTrajectory {
        RawTrajectory {
            source: "r".into(),
            points: points
                .iter()
                .map(|&(lat, lon, time)| GpsPoint {
                    lat,
                    lon,
                    altitude: 0.0,
                    time,
                })
                .collect(),
        }
    }

    #[test]
    fn resample_interpolates() {
        let r = raw(&[(0.0, 0.0, 0.0), (0.001, 0.0, 2.0), (0.003, 0.0, 4.0)]);
        let segs = project_and_resample(&r, 1.0, 5.0).unwrap();
        assert_eq!(segs.len(), 1);
        let y: Vec<f64> = segs[0].positions.iter().map(|p| p[1]).collect();
        let m = EARTH_RADIUS_M * 0.001f64.to_radians();
        assert_eq!(y.len(), 5);
        for (got, want) in y.iter().zip([0.0, 0.5 * m, m, 2.0 * m, 3.0 * m]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_splits_gaps_and_rejects_short() {
        let r = raw(&[(0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 0.0, 100.0), (0.0, 0.0, 101.0)]);
        let segs = project_and_resample(&r, 1.0, 5.0).unwrap();
        assert_eq!(segs.len(), 2);
        assert!(project_and_resample(&raw(&[(0.0, 0.0, 0.0)]), 1.0, 5.0).unwrap().is_empty());
        assert!(project_and_resample(&r, 0.0, 5.0).is_err());
    }

    #[test]
    fn speed_filter_examples() {
        assert!(speed_filter(&seg(vec![[0.0, 0.0]; 50]), 2.5, 0.95));
        let fast: Vec<Vec2> = (0..50).map(|i| [10.0 * i as f64, 0.0]).collect();
        assert!(!speed_filter(&seg(fast), 2.5, 0.95));
        let mut deltas = vec![[1.0, 0.0]; 96];
        deltas.extend(vec![[30.0, 0.0]; 4]);
        assert!(speed_filter(&from_deltas(&deltas), 2.5, 0.95));
    }

    #[test]
    fn stationarity_examples() {
        let cfg = StationarityConfig::default();
        let noise = from_deltas(&white_noise(400, 3));
        let out = segment_for_stationarity(vec![noise.clone()], &cfg);
        assert_eq!(out.segments, vec![noise]);

        let mut shifted = white_noise(400, 4);
        for d in shifted.iter_mut().skip(200) {
            d[0] += 3.0;
        }
        let out = segment_for_stationarity(vec![from_deltas(&shifted)], &cfg);
        assert!(out.segments.len() >= 2);
        assert!(out.pass_rate >= cfg.target_pass_rate);

        // 100 samples; halves of ~50 fail and fall below the 64-sample floor.
        let mut short = white_noise(99, 5);
        for (i, d) in short.iter_mut().enumerate() {
            if (25..50).contains(&i) {
                d[1] += 4.0;
            }
            if i >= 75 {
                d[0] += 4.0;
            }
        }
        let out = segment_for_stationarity(vec![from_deltas(&short)], &cfg);
        assert!(out.segments.is_empty());
        assert_eq!(out.dropped, 2);
    }

    #[test]
    fn constant_segment_is_stationary() {
        assert!(is_stationary(&seg(vec![[3.0, 4.0]; 100]), &StationarityConfig::default()));
        let walk: Vec<Vec2> = (0..100).map(|i| [i as f64, 0.5 * i as f64]).collect();
        assert!(is_stationary(&seg(walk), &StationarityConfig::default()));
    }

    #[test]
    fn window_counts() {
        let line = |n: usize| seg((0..n).map(|i| [i as f64 * 2.0, -(i as f64)]).collect());
        assert_eq!(make_windows(&line(34)).len(), 1);
        assert_eq!(make_windows(&line(133)).len(), 100);
        assert!(make_windows(&line(33)).is_empty());
        for (w, t) in make_windows(&line(40)) {
            assert_eq!(t, [2.0, -1.0]);
            assert!(w.values().chunks(2).all(|d| d == [2.0, -1.0]));
        }
    }

    #[test]
    fn synthesize_examples() {
        let mut r = rng::seeded(1);
        let tiny = MixtureParams::gaussian([0.0, 0.0], [1e-9, 1e-9], 0.0).unwrap();
        let s = synthesize_trajectory(&tiny, 50, [5.0, 6.0], 60.0, &mut r);
        let end = s.positions.last().unwrap();
        assert!((end[0] - 5.0).abs() < 1e-6 && (end[1] - 6.0).abs() < 1e-6);
        assert_eq!(s.len(), 51);

        let drift = MixtureParams::gaussian([1.0, 0.0], [0.5, 0.5], 0.0).unwrap();
        let s = synthesize_trajectory(&drift, 100, [0.0, 0.0], 60.0, &mut r);
        let end = s.positions.last().unwrap();
        let band = 3.0 * 0.5 * 10.0;
        assert!((end[0] - 100.0).abs() < band && end[1].abs() < band);
    }

    #[test]
    fn split_is_disjoint_and_proportional() {
        let segs: Vec<_> = (0..25)
            .map(|i| TrajectorySegment {
                id: i,
                ..seg(vec![[0.0, 0.0]; 40])
            })
            .collect();
        let split = split_dataset(segs, 0.9, 4).unwrap();
        assert_eq!(split.training.len() + split.validation.len(), 25);
        assert!((split.training.len() as i64 - 22).abs() <= 1);
        let mut ids: Vec<u64> = split.training.iter().chain(&split.validation).map(|s| s.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 25);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let segs = vec![
            TrajectorySegment {
                id: 3,
                parent: "a/b.plt".into(),
                interval_s: 60.0,
                positions: vec![[0.1, -2.5], [1e-7, 3.25]],
            },
            seg(vec![]),
        ];
        let mut buf = Vec::new();
        write_dataset(&mut buf, &segs).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), segs);
        assert!(read_dataset("segment_id,parent,interval_s,n_points,positions\n1,x,60,2,0,0\n".as_bytes()).is_err());
    }

    #[test]
    fn pipeline_is_idempotent_on_its_output() {
        let cfg = PipelineConfig::default();
        let mut lines = String::from(HEADER);
        let mut r = rng::seeded(9);
        for i in 0..400 {
            let lat = 39.9 + 1e-4 * i as f64 + 1e-5 * r.random::<f64>();
            let secs = i * 60;
            lines.push_str(&format!(
                "{lat},116.3,0,100,39744.0,2008-10-23,{:02}:{:02}:{:02}\n",
                secs / 3600,
                (secs / 60) % 60,
                secs % 60
            ));
        }
        let (segs, manifest) = run_pipeline(&[("a.plt".into(), lines)], &cfg).unwrap();
        assert_eq!(manifest.files, 1);
        assert!(!segs.is_empty());
        assert_eq!(manifest.windows, window_set(&segs).unwrap().len());
        let again = segment_for_stationarity(segs.clone(), &cfg.stationarity);
        assert_eq!(again.segments, segs);
        assert!(segs.iter().all(|s| speed_filter(s, cfg.vmax_mps, cfg.speed_percentile)));
    }
}
