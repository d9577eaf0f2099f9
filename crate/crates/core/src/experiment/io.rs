//! Plain-text sinogram format and JSON helpers.
//!
//! A sinogram file starts with `# key = value` header lines describing the
//! geometry, followed by one row per time index with one value per detector.
//! Numbers use 17 significant digits so that reading and re-writing a file
//! reproduces it byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::AcquisitionGeometry;
use crate::model::Sinogram;

const MAGIC: &str = "# gmmct sinogram v1";

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter().map(|&x| fmt(x)).collect::<Vec<_>>().join(" ")
}

pub fn format_sinogram(g: &Sinogram) -> String {
    let geom = g.geometry();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "# dim = {}", geom.dim());
    let _ = writeln!(out, "# source = {}", fmt_vec(&geom.source));
    let _ = writeln!(out, "# detector_start = {}", fmt_vec(&geom.detector_start));
    let _ = writeln!(out, "# detector_end = {}", fmt_vec(&geom.detector_end));
    let _ = writeln!(out, "# num_detectors = {}", geom.num_detectors);
    let _ = writeln!(out, "# t_min = {}", fmt(geom.t_min));
    let _ = writeln!(out, "# t_max = {}", fmt(geom.t_max));
    let _ = writeln!(out, "# num_times = {}", geom.num_times);
    let _ = writeln!(out, "# fixed_component_index = {}", geom.fixed_component_index);
    for m_t in 0..g.num_times() {
        let row: Vec<String> = g.column(m_t).iter().map(|&x| fmt(x)).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse(format!("invalid number {s:?}")))
}

pub fn parse_sinogram(text: &str) -> Result<Sinogram> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MAGIC) {
        return Err(Error::Parse("missing sinogram header".into()));
    }
    let mut header = std::collections::BTreeMap::new();
    let mut rows = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix('#') {
            let (k, v) = rest.split_once('=').ok_or_else(|| Error::Parse(format!("bad header line {line:?}")))?;
            header.insert(k.trim().to_string(), v.trim().to_string());
        } else if !line.trim().is_empty() {
            rows.push(line);
        }
    }
    let get = |k: &str| header.get(k).ok_or_else(|| Error::Parse(format!("missing header field {k}")));
    let vec = |k: &str| -> Result<DVector<f64>> {
        Ok(DVector::from_vec(get(k)?.split_whitespace().map(parse_f64).collect::<Result<_>>()?))
    };
    let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Parse(format!("invalid integer for {k}"))) };
    let geom = AcquisitionGeometry {
        source: vec("source")?,
        detector_start: vec("detector_start")?,
        detector_end: vec("detector_end")?,
        num_detectors: int("num_detectors")?,
        t_min: parse_f64(get("t_min")?)?,
        t_max: parse_f64(get("t_max")?)?,
        num_times: int("num_times")?,
        fixed_component_index: int("fixed_component_index")?,
    };
    if geom.dim() != int("dim")? {
        return Err(Error::Parse("dim does not match the source".into()));
    }
    geom.validate()?;
    if rows.len() != geom.num_times {
        return Err(Error::Parse(format!("expected {} rows, found {}", geom.num_times, rows.len())));
    }
    let mut values = Vec::with_capacity(geom.num_times * geom.num_detectors);
    for (i, row) in rows.iter().enumerate() {
        let before = values.len();
        for tok in row.split_whitespace() {
            values.push(parse_f64(tok)?);
        }
        if values.len() - before != geom.num_detectors {
            return Err(Error::Parse(format!("row {i} has {} values", values.len() - before)));
        }
    }
    Sinogram::from_values(values, geom)
}

pub fn write_sinogram(path: &Path, g: &Sinogram) -> Result<()> {
    Ok(fs::write(path, format_sinogram(g))?)
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    parse_sinogram(&fs::read_to_string(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(fs::write(path, text)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::{default_geometry, five_particle_scene};
    use crate::model::simulate_sinogram;

    #[test]
    fn sinogram_text_round_trip_is_exact() {
        let g = simulate_sinogram(&five_particle_scene(), &default_geometry()).unwrap();
        let text = format_sinogram(&g);
        let back = parse_sinogram(&text).unwrap();
        assert_eq!(back.values(), g.values());
        assert_eq!(format_sinogram(&back), text);
    }

    #[test]
    fn rejects_truncated_file() {
        let g = simulate_sinogram(&five_particle_scene(), &default_geometry()).unwrap();
        let text = format_sinogram(&g);
        let cut: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_sinogram(&cut), Err(Error::Parse(_))));
        assert!(parse_sinogram("hello").is_err());
    }
}
