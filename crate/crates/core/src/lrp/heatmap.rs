//! Input-relevance heatmaps as plain PPM images and raw CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Maps relevance to RGB: white at zero, red for positive, blue for
/// negative, scaled symmetrically by the largest magnitude.
pub fn colorize(relevance: &[f64]) -> Vec<[u8; 3]> {
    let max = relevance.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    relevance
        .iter()
        .map(|&r| {
            let t = if max > 0.0 { (r.abs() / max).min(1.0) } else { 0.0 };
            let fade = (255.0 * (1.0 - t)).round() as u8;
            if r >= 0.0 {
                [255, fade, fade]
            } else {
                [fade, fade, 255]
            }
        })
        .collect()
}

/// Renders a `height x width` relevance map as an ASCII PPM (P3) image.
pub fn to_ppm(relevance: &[f64], height: usize, width: usize) -> Result<String> {
    if relevance.len() != height * width || relevance.is_empty() {
        return Err(Error::Validation(format!(
            "{} relevance values for a {height}x{width} image",
            relevance.len()
        )));
    }
    let mut out = format!("P3\n{width} {height}\n255\n");
    for row in colorize(relevance).chunks(width) {
        let line: Vec<String> = row.iter().map(|[r, g, b]| format!("{r} {g} {b}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Raw relevance, one image row per CSV line, full round-trip precision.
pub fn to_csv(relevance: &[f64], height: usize, width: usize) -> Result<String> {
    if relevance.len() != height * width || relevance.is_empty() {
        return Err(Error::Validation(format!(
            "{} relevance values for a {height}x{width} image",
            relevance.len()
        )));
    }
    let mut out = String::new();
    for row in relevance.chunks(width) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes `<stem>.ppm` and `<stem>.csv` into `dir`.
pub fn write_heatmap(dir: &Path, stem: &str, relevance: &[f64], height: usize, width: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.ppm")), to_ppm(relevance, height, width)?)?;
    fs::write(dir.join(format!("{stem}.csv")), to_csv(relevance, height, width)?)?;
    Ok(())
}

/// Sums a `[channels, height, width]` relevance map over channels.
pub fn collapse_channels(relevance: &[f64], channels: usize) -> Vec<f64> {
    let plane = relevance.len() / channels.max(1);
    let mut out = vec![0.0; plane];
    for ch in relevance.chunks_exact(plane) {
        out.iter_mut().zip(ch).for_each(|(o, v)| *o += v);
    }
    out
}

/// Fraction of total absolute relevance that falls where `mask` is true.
pub fn mass_inside(relevance: &[f64], mask: &[bool]) -> f64 {
    let total: f64 = relevance.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = relevance
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v.abs())
        .sum();
    inside / total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors_are_symmetric() {
        let c = colorize(&[2.0, -2.0, 0.0, 1.0]);
        assert_eq!(c[0], [255, 0, 0]);
        assert_eq!(c[1], [0, 0, 255]);
        assert_eq!(c[2], [255, 255, 255]);
        assert_eq!(c[3], [255, 128, 128]);
    }

    #[test]
    fn ppm_header_and_size() {
        let ppm = to_ppm(&[0.0; 6], 2, 3).unwrap();
        let mut lines = ppm.lines();
        assert_eq!(lines.next(), Some("P3"));
        assert_eq!(lines.next(), Some("3 2"));
        assert_eq!(lines.next(), Some("255"));
        assert_eq!(lines.count(), 2);
        assert!(to_ppm(&[0.0; 5], 2, 3).is_err());
    }

    #[test]
    fn csv_roundtrips() {
        let vals = [0.1, -1e-300, 3.0, f64::MIN_POSITIVE];
        let csv = to_csv(&vals, 2, 2).unwrap();
        let back: Vec<f64> = csv
            .lines()
            .flat_map(|l| l.split(',').map(|s| s.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(back, vals);
    }

    #[test]
    fn mass_fraction() {
        assert_eq!(mass_inside(&[1.0, -3.0, 0.0], &[true, false, true]), 0.25);
        assert_eq!(mass_inside(&[0.0], &[true]), 0.0);
    }
}
