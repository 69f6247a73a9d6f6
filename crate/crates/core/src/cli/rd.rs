//! Rate-distortion points: measurement, CSV and gnuplot output.

use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use super::{runtime, CliError};
use crate::media::{load_frame_sequence, psnr, ImageTensor};
use crate::vidflow::decode_stream;

#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub series: String,
    pub label: String,
    /// Unknown for decoded frames given without their bitstream.
    pub bpp: Option<f64>,
    /// Mean PSNR over frames; `+inf` for a lossless match.
    pub psnr: f64,
}

impl RdPoint {
    pub fn is_infinite(&self) -> bool {
        self.psnr == f64::INFINITY
    }
}

fn mean_psnr(refs: &[ImageTensor], decoded: &[ImageTensor]) -> Result<f64, CliError> {
    if refs.len() != decoded.len() {
        return Err(CliError::Runtime(format!(
            "{} reference frames but {} decoded frames",
            refs.len(),
            decoded.len()
        )));
    }
    let mut total = 0.0;
    for (r, d) in refs.iter().zip(decoded) {
        total += psnr(r, d).map_err(runtime)?;
    }
    Ok(total / refs.len() as f64)
}

/// One RD point for `path`: an `.ipf` file (decoded here and rounded to
/// 8 bits like `decode` output) or decoded stills.
pub fn evaluate(refs: &[ImageTensor], path: &Path, series: &str) -> Result<RdPoint, CliError> {
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let is_ipf = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ipf"));
    let (decoded, bpp) = if is_ipf {
        let bytes = std::fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let mut frames = Vec::new();
        let header = decode_stream(&bytes, |_, f| {
            frames.push(f.to_8bit_levels());
            Ok(())
        })
        .map_err(runtime)?;
        let pixels = f64::from(header.width) * f64::from(header.height) * f64::from(header.frame_count);
        (frames, Some(8.0 * bytes.len() as f64 / pixels))
    } else {
        (load_frame_sequence(path).map_err(runtime)?, None)
    };
    Ok(RdPoint {
        series: series.to_string(),
        label,
        bpp,
        psnr: mean_psnr(refs, &decoded)?,
    })
}

#[derive(Deserialize)]
struct BaselineRow {
    series: String,
    #[serde(default)]
    label: Option<String>,
    bpp: f64,
    psnr: f64,
}

/// Reads externally measured points (`series,bpp,psnr[,label]` with a
/// header row).
pub fn read_baseline_csv(path: &Path) -> Result<Vec<RdPoint>, CliError> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    reader
        .deserialize::<BaselineRow>()
        .map(|row| {
            let row = row.map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            Ok(RdPoint {
                series: row.series,
                label: row.label.unwrap_or_default(),
                bpp: Some(row.bpp),
                psnr: row.psnr,
            })
        })
        .collect()
}

fn fmt_psnr(p: f64) -> String {
    if p == f64::INFINITY {
        "inf".into()
    } else {
        format!("{p:.6}")
    }
}

/// `series,label,bpp,psnr,psnr_infinite`; unknown bpp is left empty.
pub fn write_rd_csv<W: Write>(points: &[RdPoint], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series", "label", "bpp", "psnr", "psnr_infinite"])
        .map_err(runtime)?;
    for p in points {
        let bpp = p.bpp.map(|b| format!("{b:.6}")).unwrap_or_default();
        w.write_record([
            p.series.as_str(),
            p.label.as_str(),
            bpp.as_str(),
            fmt_psnr(p.psnr).as_str(),
            if p.is_infinite() { "1" } else { "0" },
        ])
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

/// One gnuplot data block per series (separated by two blank lines, so
/// `index` selects a series), sorted by bpp. Points without a rate or
/// with infinite PSNR are listed as comments.
pub fn write_gnuplot<W: Write>(points: &[RdPoint], mut out: W) -> Result<(), CliError> {
    let mut series: Vec<&str> = Vec::new();
    for p in points {
        if !series.contains(&p.series.as_str()) {
            series.push(&p.series);
        }
    }
    for (i, s) in series.iter().enumerate() {
        if i > 0 {
            writeln!(out, "\n").map_err(runtime)?;
        }
        writeln!(out, "# {s}").map_err(runtime)?;
        writeln!(out, "# bpp psnr").map_err(runtime)?;
        let mut pts: Vec<&RdPoint> = points.iter().filter(|p| p.series == *s).collect();
        pts.sort_by(|a, b| a.bpp.unwrap_or(f64::NAN).total_cmp(&b.bpp.unwrap_or(f64::NAN)));
        for p in pts {
            match p.bpp {
                Some(b) if !p.is_infinite() => writeln!(out, "{b:.6} {:.6}", p.psnr),
                _ => writeln!(out, "# {} bpp {:?} psnr {}", p.label, p.bpp, fmt_psnr(p.psnr)),
            }
            .map_err(runtime)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::save_frame;

    fn point(series: &str, bpp: f64, psnr: f64) -> RdPoint {
        RdPoint {
            series: series.into(),
            label: String::new(),
            bpp: Some(bpp),
            psnr,
        }
    }

    #[test]
    fn identical_frames_flag_infinite_psnr() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::filled(4, 4, [0.2, 0.4, 0.6]).unwrap().to_8bit_levels();
        let path = dir.path().join("a.png");
        save_frame(&img, &path).unwrap();
        let p = evaluate(&[img], &path, "x").unwrap();
        assert!(p.is_infinite());
        let mut out = Vec::new();
        write_rd_csv(&[p], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "series,label,bpp,psnr,psnr_infinite\nx,a,,inf,1\n"
        );
    }

    #[test]
    fn frame_count_mismatch() {
        let img = ImageTensor::filled(2, 2, [0.0; 3]).unwrap();
        assert!(mean_psnr(&[img.clone(), img.clone()], &[img]).is_err());
    }

    #[test]
    fn baseline_merge_and_gnuplot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.csv");
        std::fs::write(&path, "series,bpp,psnr\nbpg,0.5,30.0\nbpg,0.25,27.5\njpeg,0.5,25.0\n").unwrap();
        let mut pts = vec![point("ipf", 0.3, 28.0), point("ipf", 0.1, 24.0), point("ipf", 0.6, 31.0)];
        pts.extend(read_baseline_csv(&path).unwrap());
        assert_eq!(pts.len(), 6);
        let mut out = Vec::new();
        write_gnuplot(&pts, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let blocks: Vec<&str> = text.split("\n\n\n").collect();
        assert_eq!(blocks.len(), 3);
        assert!(blocks[0].starts_with("# ipf\n# bpp psnr\n0.100000 24.000000\n0.300000"));
        assert!(blocks[1].starts_with("# bpg\n# bpp psnr\n0.250000 27.500000\n"));
        assert!(blocks[2].starts_with("# jpeg"));
    }
}
