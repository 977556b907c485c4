//! Pulse and record files.
//!
//! Pulses are stored as CSV (`t_start,u_1,…`, one row per segment) next to a
//! TOML sidecar carrying `T`, `M`, the system and grid. Floats are written with
//! 17 significant digits, which round-trips every `f64` exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::PiecewiseConstantPulse;
use crate::systems::{OmegaGrid, SystemId};

/// `{:.16e}`: one leading digit and sixteen after the point.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, toml::to_string(value)?.as_bytes())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(toml::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseMetadata {
    pub total_time: f64,
    pub n_segments: usize,
    pub n_controls: usize,
    pub system: Option<SystemId>,
    pub grid: Option<OmegaGrid>,
    pub seed: Option<u64>,
}

impl PulseMetadata {
    pub fn for_pulse(pulse: &PiecewiseConstantPulse) -> Self {
        Self {
            total_time: pulse.total_time(),
            n_segments: pulse.n_segments(),
            n_controls: pulse.n_controls(),
            system: None,
            grid: None,
            seed: None,
        }
    }
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("toml")
}

pub fn pulse_csv(pulse: &PiecewiseConstantPulse) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t_start".to_string()];
    header.extend((1..=pulse.n_controls()).map(|j| format!("u_{j}")));
    w.write_record(&header)?;
    let dt = pulse.dt();
    for k in 0..pulse.n_segments() {
        let mut row = vec![format_f64(k as f64 * dt)];
        row.extend(pulse.segment(k).iter().map(|&u| format_f64(u)));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes the CSV at `path` and its sidecar next to it.
pub fn write_pulse(path: &Path, pulse: &PiecewiseConstantPulse, meta: &PulseMetadata) -> Result<()> {
    if meta.total_time != pulse.total_time() || meta.n_segments != pulse.n_segments() || meta.n_controls != pulse.n_controls() {
        return Err(Error::InvalidPulse("metadata does not describe this pulse".into()));
    }
    atomic_write(path, &pulse_csv(pulse)?)?;
    write_toml(&sidecar_path(path), meta)
}

/// Reads amplitudes from CSV text, taking the shape and duration from `meta`.
pub fn parse_pulse_csv(text: &str, meta: &PulseMetadata) -> Result<PiecewiseConstantPulse> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.get(0) != Some("t_start") || header.len() != meta.n_controls + 1 {
        return Err(Error::InvalidPulse(format!("unexpected pulse header {header:?}")));
    }
    let mut amplitudes = Vec::with_capacity(meta.n_segments * meta.n_controls);
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::InvalidPulse(format!("bad amplitude `{field}`")))?;
            amplitudes.push(v);
        }
        rows += 1;
    }
    if rows != meta.n_segments {
        return Err(Error::InvalidPulse(format!("expected {} rows, found {rows}", meta.n_segments)));
    }
    PiecewiseConstantPulse::new(meta.total_time, meta.n_segments, meta.n_controls, amplitudes)
}

pub fn read_pulse(path: &Path) -> Result<(PiecewiseConstantPulse, PulseMetadata)> {
    let meta: PulseMetadata = read_toml(&sidecar_path(path))?;
    let pulse = parse_pulse_csv(&fs::read_to_string(path)?, &meta)?;
    Ok((pulse, meta))
}

/// `omega,error` rows.
pub fn sweep_csv(points: &[(f64, f64)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["omega", "error"])?;
    for &(o, e) in points {
        w.write_record([format_f64(o), format_f64(e)])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::InvalidConfig(format!("bad sweep row {rec:?}")))
        };
        out.push((get(0)?, get(1)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grape::random_initial_pulse;
    use proptest::prelude::*;

    #[test]
    fn pulse_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pulse.csv");
        let mut p = random_initial_pulse(11, 7.3, 29, 2, 3.0).unwrap();
        let mut amps = p.amplitudes().to_vec();
        amps[0] = f64::MIN_POSITIVE;
        amps[1] = -1e300;
        amps[2] = 0.1 + 0.2;
        amps[3] = -0.0;
        p = p.with_amplitudes(amps).unwrap();
        let mut meta = PulseMetadata::for_pulse(&p);
        meta.system = Some(SystemId::A);
        meta.seed = Some(11);
        write_pulse(&path, &p, &meta).unwrap();
        let (q, m) = read_pulse(&path).unwrap();
        assert_eq!(m, meta);
        for (a, b) in p.amplitudes().iter().zip(q.amplitudes()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t_start,u_1,u_2\n"));
        assert_eq!(text.lines().count(), 30);
    }

    #[test]
    fn malformed_pulses_are_rejected() {
        let meta = PulseMetadata {
            total_time: 1.0,
            n_segments: 2,
            n_controls: 1,
            system: None,
            grid: None,
            seed: None,
        };
        assert!(parse_pulse_csv("t_start,u_1\n0,1\n", &meta).is_err());
        assert!(parse_pulse_csv("t,u_1\n0,1\n0.5,2\n", &meta).is_err());
        assert!(parse_pulse_csv("t_start,u_1\n0,1\n0.5,abc\n", &meta).is_err());
        assert!(parse_pulse_csv("t_start,u_1\n0,1\n0.5,2\n", &meta).is_ok());
        let p = PiecewiseConstantPulse::zeros(2.0, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(write_pulse(&dir.path().join("x.csv"), &p, &meta).is_err());
    }

    #[test]
    fn sweep_round_trip() {
        let pts = vec![(1.0, 1e-3), (1.005, 2.5e-17), (2.0, 0.1)];
        let bytes = sweep_csv(&pts).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("omega,error\n"));
        assert_eq!(parse_sweep_csv(&text).unwrap(), pts);
    }

    proptest! {
        #[test]
        fn formatted_floats_round_trip(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let y: f64 = format_f64(x).parse().unwrap();
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
