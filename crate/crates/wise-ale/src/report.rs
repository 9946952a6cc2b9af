//! Figure and table output: metrics CSV read/write, posterior scatter SVG,
//! training-curve SVG, and reconstruction strips.
//!
//! All figures are static SVG 1.1 built as plain strings; output is a pure
//! function of the inputs, so repeated invocations are byte-identical.

use crate::autodiff::DenseArray;
use crate::data::SineMeta;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::trainer::MetricsRecord;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::fmt::Write as _;
use std::path::Path;

/// CSV column order written and read by this module.
pub const METRICS_HEADER: &str =
    "epoch,step,recon_term,prior_term,objective,aevb_kl,elbo_proxy,wall_ms,clamp_count";

/// Writes the metrics table; floats use the shortest representation that
/// round-trips, so reading the file back is lossless.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::with_capacity(records.len() * 64 + 64);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.recon_term,
            r.prior_term,
            r.objective,
            r.aevb_kl,
            r.elbo_proxy,
            r.wall_ms,
            r.clamp_count
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a metrics table written by [`write_metrics_csv`]; malformed input
/// is reported with its line number.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(Error::format(&p, format!("line 1: unexpected header {line:?}")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::format(
                &p,
                format!("line {}: expected 9 fields, got {}", i + 1, fields.len()),
            ));
        }
        fn num<T: std::str::FromStr>(p: &str, line: usize, s: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::format(p, format!("line {line}: bad value {s:?}")))
        }
        out.push(MetricsRecord {
            epoch: num(&p, i + 1, fields[0])?,
            step: num(&p, i + 1, fields[1])?,
            recon_term: num(&p, i + 1, fields[2])?,
            prior_term: num(&p, i + 1, fields[3])?,
            objective: num(&p, i + 1, fields[4])?,
            aevb_kl: num(&p, i + 1, fields[5])?,
            elbo_proxy: num(&p, i + 1, fields[6])?,
            wall_ms: num(&p, i + 1, fields[7])?,
            clamp_count: num(&p, i + 1, fields[8])?,
        });
    }
    Ok(out)
}

/// Replaces the wall_ms column with `-` in every data row: the documented
/// mask for byte-comparing metrics files across runs.
pub fn mask_wall_ms(csv_text: &str) -> String {
    let mut out = String::with_capacity(csv_text.len());
    for (i, line) in csv_text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            out.push_str(line);
        } else {
            let fields: Vec<&str> = line.split(',').collect();
            for (j, f) in fields.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(if j == 7 { "-" } else { f });
            }
        }
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn svg_open(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
}

/// Summary returned by [`embed_scatter`], including the quantity the
/// sharpness comparison reads.
#[derive(Debug, Clone)]
pub struct EmbedSummary {
    /// Mean per-dimension posterior σ over the drawn points.
    pub mean_sigma: f64,
    pub n_points: usize,
}

/// Draws `n_points` seeded posterior 1-σ ellipses of a 2-D model over the
/// unit prior circle, writes the SVG and a CSV of
/// `(mu1, mu2, sigma1, sigma2, label)`, and returns the σ summary.
pub fn embed_scatter(
    params: &ModelParams,
    images: &DenseArray,
    labels: Option<&[u8]>,
    n_points: usize,
    seed: u64,
    out_svg: &Path,
    out_csv: &Path,
) -> Result<EmbedSummary> {
    if params.arch.d_z != 2 {
        return Err(Error::usage(format!(
            "embed_scatter needs a 2-D latent space, got d_z = {}; train with --latent-dim 2",
            params.arch.d_z
        )));
    }
    let n = images.shape()[0];
    if n_points == 0 || n_points > n {
        return Err(Error::usage(format!(
            "cannot draw {n_points} points from {n} rows"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    idx.truncate(n_points);

    let d = images.shape()[1];
    let mut rows = Vec::with_capacity(n_points * d);
    for &i in &idx {
        rows.extend_from_slice(&images.data()[i * d..(i + 1) * d]);
    }
    let x = DenseArray::from_vec(vec![n_points, d], rows)?;
    let (means, log_vars) = params.encode_values(&x)?;

    let mut csv = String::from("mu1,mu2,sigma1,sigma2,label\n");
    let mut points = Vec::with_capacity(n_points);
    let mut sigma_sum = 0.0;
    for (row, &i) in idx.iter().enumerate() {
        let mu1 = means.at2(row, 0);
        let mu2 = means.at2(row, 1);
        let s1 = (0.5 * log_vars.at2(row, 0)).exp();
        let s2 = (0.5 * log_vars.at2(row, 1)).exp();
        sigma_sum += s1 + s2;
        let label: i32 = labels.map(|l| l[i] as i32).unwrap_or(-1);
        let _ = writeln!(csv, "{mu1},{mu2},{s1},{s2},{label}");
        points.push((mu1, mu2, s1, s2, label));
    }
    std::fs::write(out_csv, csv).map_err(|e| Error::io(out_csv.display().to_string(), e))?;

    // view bounds: all ellipses plus the unit prior circle
    let mut lo = -1.2f64;
    let mut hi = 1.2f64;
    for &(mu1, mu2, s1, s2, _) in &points {
        lo = lo.min(mu1 - 2.0 * s1).min(mu2 - 2.0 * s2);
        hi = hi.max(mu1 + 2.0 * s1).max(mu2 + 2.0 * s2);
    }
    let size = 560.0;
    let pad = 20.0;
    let scale = (size - 2.0 * pad) / (hi - lo);
    let tx = |v: f64| pad + (v - lo) * scale;
    let ty = |v: f64| size - pad - (v - lo) * scale;

    let mut svg = String::new();
    svg_open(&mut svg, size, size);
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r##"<circle cx="{}" cy="{}" r="{}" fill="none" stroke="#333333" stroke-width="1.5" stroke-dasharray="6,4"/>"##,
        tx(0.0),
        ty(0.0),
        scale
    );
    for &(mu1, mu2, s1, s2, label) in &points {
        let color = if label >= 0 {
            PALETTE[label as usize % PALETTE.len()]
        } else {
            "#1f77b4"
        };
        let _ = writeln!(
            svg,
            r#"<ellipse cx="{:.3}" cy="{:.3}" rx="{:.3}" ry="{:.3}" fill="{color}" fill-opacity="0.25" stroke="{color}" stroke-width="1"/>"#,
            tx(mu1),
            ty(mu2),
            s1 * scale,
            s2 * scale
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(out_svg, svg).map_err(|e| Error::io(out_svg.display().to_string(), e))?;
    Ok(EmbedSummary {
        mean_sigma: sigma_sum / (2.0 * n_points as f64),
        n_points,
    })
}

fn panel_polyline(
    out: &mut String,
    series: &[(String, Vec<f64>)],
    title: &str,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, ys) in series {
        for &v in ys {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let n_max = series.iter().map(|(_, ys)| ys.len()).max().unwrap_or(1);
    let _ = writeln!(
        out,
        r##"<g class="panel"><rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#888888"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13">{title}</text>"#,
        x0,
        y0 - 6.0
    );
    let _ = writeln!(
        out,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="10" fill="#555555">[{lo:.4}, {hi:.4}]</text>"##,
        x0 + 4.0,
        y0 + 12.0
    );
    for (si, (_, ys)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut pts = String::new();
        for (i, &v) in ys.iter().enumerate() {
            let px = x0 + if n_max > 1 {
                w * i as f64 / (n_max - 1) as f64
            } else {
                0.0
            };
            let py = y0 + h - h * (v - lo) / (hi - lo);
            let _ = write!(pts, "{px:.2},{py:.2} ");
        }
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#,
            pts.trim_end()
        );
    }
    out.push_str("</g>\n");
}

/// Three aligned panels (reconstruction term, per-sample KL yardstick, ELBO
/// proxy) with one polyline per run; values are exactly those in the
/// metrics records. `stride` > 1 downsamples the step axis.
pub fn training_curves(
    runs: &[(String, Vec<MetricsRecord>)],
    stride: usize,
    out_path: &Path,
) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::usage("training_curves needs at least one run"));
    }
    let stride = stride.max(1);
    let column = |f: fn(&MetricsRecord) -> f64| -> Vec<(String, Vec<f64>)> {
        runs.iter()
            .map(|(name, recs)| {
                (
                    name.clone(),
                    recs.iter().step_by(stride).map(f).collect::<Vec<f64>>(),
                )
            })
            .collect()
    };
    let (w, h) = (900.0, 260.0);
    let panel_w = 260.0;
    let panel_h = 170.0;
    let mut svg = String::new();
    svg_open(&mut svg, w, h);
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    panel_polyline(&mut svg, &column(|r| r.recon_term), "recon_term", 30.0, 40.0, panel_w, panel_h);
    panel_polyline(&mut svg, &column(|r| r.aevb_kl), "aevb_kl", 330.0, 40.0, panel_w, panel_h);
    panel_polyline(&mut svg, &column(|r| r.elbo_proxy), "elbo_proxy", 630.0, 40.0, panel_w, panel_h);
    for (si, (name, _)) in runs.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let y = 230.0 + 14.0 * si as f64;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><rect x="30" y="{}" width="10" height="10" fill="{color}"/><text x="46" y="{}" font-family="sans-serif" font-size="12">{name}</text></g>"#,
            y,
            y + 9.0
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(out_path, svg).map_err(|e| Error::io(out_path.display().to_string(), e))
}

/// Input rows versus their reconstructions: waveform polylines for sine
/// data, 28×28 grayscale rasters for images. Each drawn unit is one
/// `<g class="panel">`.
pub fn recon_strip(
    params: &ModelParams,
    x: &DenseArray,
    sine_meta: Option<&[SineMeta]>,
    indices: &[usize],
    out_path: &Path,
) -> Result<()> {
    let n = x.shape()[0];
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::usage(format!(
            "index {bad} out of range for {n} rows"
        )));
    }
    if indices.is_empty() {
        return Err(Error::usage("recon_strip needs at least one index"));
    }
    let d = x.shape()[1];
    let mut rows = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        rows.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    let sel = DenseArray::from_vec(vec![indices.len(), d], rows)?;
    let (means, _) = params.encode_values(&sel)?;
    let xhat = params.decode_values(&means)?;

    let is_wave = sine_meta.is_some() || d != 784;
    let mut svg = String::new();
    if is_wave {
        let panel_w = 360.0;
        let panel_h = 90.0;
        let w = panel_w + 60.0;
        let h = (panel_h + 24.0) * indices.len() as f64 + 30.0;
        svg_open(&mut svg, w, h);
        let _ = writeln!(svg, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
        for (row, &i) in indices.iter().enumerate() {
            let y0 = 20.0 + (panel_h + 24.0) * row as f64;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for k in 0..d {
                lo = lo.min(sel.at2(row, k)).min(xhat.at2(row, k));
                hi = hi.max(sel.at2(row, k)).max(xhat.at2(row, k));
            }
            if hi - lo < 1e-9 {
                hi = lo + 1.0;
            }
            let _ = writeln!(
                svg,
                r##"<g class="panel"><rect x="30" y="{y0}" width="{panel_w}" height="{panel_h}" fill="none" stroke="#888888"/>"##
            );
            let _ = writeln!(
                svg,
                r#"<text x="32" y="{}" font-family="sans-serif" font-size="11">row {i}</text>"#,
                y0 - 4.0
            );
            for (which, src) in [(0usize, &sel), (1usize, &xhat)] {
                let color = if which == 0 { "#999999" } else { "#d62728" };
                let mut pts = String::new();
                for k in 0..d {
                    let px = 30.0 + panel_w * k as f64 / (d - 1) as f64;
                    let py = y0 + panel_h - panel_h * (src.at2(row, k) - lo) / (hi - lo);
                    let _ = write!(pts, "{px:.2},{py:.2} ");
                }
                let _ = writeln!(
                    svg,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.1"/>"#,
                    pts.trim_end()
                );
            }
            svg.push_str("</g>\n");
        }
    } else {
        // image pairs: input above, reconstruction below, 3px per pixel
        let cell = 3.0;
        let img_w = 28.0 * cell;
        let w = (img_w + 12.0) * indices.len() as f64 + 12.0;
        let h = img_w * 2.0 + 36.0;
        svg_open(&mut svg, w, h);
        let _ = writeln!(svg, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
        for (row, _) in indices.iter().enumerate() {
            let x0 = 12.0 + (img_w + 12.0) * row as f64;
            for (which, src) in [(0usize, &sel), (1usize, &xhat)] {
                let y0 = 12.0 + which as f64 * (img_w + 12.0);
                let _ = writeln!(svg, r#"<g class="panel">"#);
                for py in 0..28 {
                    for px in 0..28 {
                        let v = src.at2(row, py * 28 + px).clamp(0.0, 1.0);
                        let shade = (255.0 * (1.0 - v)).round() as u8;
                        if shade < 250 {
                            let _ = writeln!(
                                svg,
                                r#"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},{shade})"/>"#,
                                x0 + px as f64 * cell,
                                y0 + py as f64 * cell
                            );
                        }
                    }
                }
                svg.push_str("</g>\n");
            }
        }
    }
    svg.push_str("</svg>\n");
    std::fs::write(out_path, svg).map_err(|e| Error::io(out_path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Architecture};
    use crate::objective::Likelihood;

    fn records(n: usize) -> Vec<MetricsRecord> {
        (0..n)
            .map(|i| MetricsRecord {
                epoch: i / 4,
                step: i as u64,
                recon_term: -1.5 * i as f64,
                prior_term: 0.25,
                objective: -1.5 * i as f64 - 0.25,
                aevb_kl: 0.5,
                elbo_proxy: -1.5 * i as f64 - 0.5,
                wall_ms: 7,
                clamp_count: 0,
            })
            .collect()
    }

    #[test]
    fn metrics_csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut recs = records(6);
        recs[3].recon_term = -0.1234567890123456789;
        recs[3].elbo_proxy = f64::MIN_POSITIVE;
        write_metrics_csv(&path, &recs).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(recs.len(), back.len());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a, b);
            assert_eq!(a.recon_term.to_bits(), b.recon_term.to_bits());
        }
    }

    #[test]
    fn malformed_csv_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            format!("{METRICS_HEADER}\n0,0,1,1,0,0,0,1,0\n0,1,oops,1,0,0,0,1,0\n"),
        )
        .unwrap();
        let err = read_metrics_csv(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn wall_ms_mask_changes_only_column_eight() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &records(3)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let masked = mask_wall_ms(&text);
        for (i, line) in masked.lines().enumerate() {
            if i == 0 {
                assert_eq!(line, METRICS_HEADER);
            } else {
                let fields: Vec<&str> = line.split(',').collect();
                assert_eq!(fields[7], "-");
                assert_eq!(fields.len(), 9);
            }
        }
    }

    #[test]
    fn scatter_zero_model_centers_ellipses_at_origin() {
        let arch = Architecture::new(784, 2, vec![8], vec![8], Likelihood::Bernoulli).unwrap();
        let mut p = init_params(&arch, 0);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let ds = crate::data::generate_synthetic_digits(80, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let svg = dir.path().join("embed.svg");
        let csv = dir.path().join("embed.csv");
        let summary =
            embed_scatter(&p, &ds.images, Some(&ds.labels), 64, 9, &svg, &csv).unwrap();
        assert_eq!(summary.n_points, 64);
        // zero encoder: μ = 0, σ = 1 for every point
        assert!((summary.mean_sigma - 1.0).abs() < 1e-12);
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 65); // header + 64 rows
        for line in text.lines().skip(1) {
            assert!(line.starts_with("0,0,1,1,"), "{line}");
        }
    }

    #[test]
    fn scatter_rejects_non_2d_latent() {
        let arch = Architecture::new(
            784,
            3,
            vec![8],
            vec![8],
            Likelihood::Bernoulli,
        )
        .unwrap();
        let p = init_params(&arch, 0);
        let ds = crate::data::generate_synthetic_digits(10, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = embed_scatter(
            &p,
            &ds.images,
            None,
            4,
            0,
            &dir.path().join("a.svg"),
            &dir.path().join("a.csv"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("2-D"), "{err}");
    }

    #[test]
    fn curves_constant_metrics_make_horizontal_polylines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.svg");
        let recs: Vec<MetricsRecord> = (0..5)
            .map(|i| MetricsRecord {
                epoch: 0,
                step: i,
                recon_term: 2.0,
                prior_term: 1.0,
                objective: 1.0,
                aevb_kl: 3.0,
                elbo_proxy: -1.0,
                wall_ms: 1,
                clamp_count: 0,
            })
            .collect();
        training_curves(&[("flat".into(), recs)], 1, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // one polyline per panel
        assert_eq!(text.matches("<polyline").count(), 3);
        // constant series: every vertex shares the same y
        for cap in text.split("<polyline").skip(1) {
            let pts = cap.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            let ys: Vec<&str> = pts
                .split_whitespace()
                .map(|p| p.split(',').nth(1).unwrap())
                .collect();
            assert!(ys.windows(2).all(|w| w[0] == w[1]), "{pts}");
            assert_eq!(ys.len(), 5);
        }
    }

    #[test]
    fn curves_two_runs_two_legend_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.svg");
        training_curves(
            &[("a".into(), records(4)), ("b".into(), records(4))],
            1,
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches(r#"class="legend""#).count(), 2);
        assert_eq!(text.matches("<polyline").count(), 6);
    }

    #[test]
    fn image_recon_strip_has_two_panels_per_index() {
        let arch = Architecture::new(784, 2, vec![8], vec![8], Likelihood::Bernoulli).unwrap();
        let p = init_params(&arch, 3);
        let ds = crate::data::generate_synthetic_digits(10, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recon.svg");
        recon_strip(&p, &ds.images, None, &[0, 3, 7], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches(r#"<g class="panel""#).count(), 6);
    }

    #[test]
    fn recon_strip_rejects_bad_indices() {
        let arch = Architecture::new(784, 2, vec![8], vec![8], Likelihood::Bernoulli).unwrap();
        let p = init_params(&arch, 3);
        let ds = crate::data::generate_synthetic_digits(4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = recon_strip(&p, &ds.images, None, &[9], &dir.path().join("r.svg"))
            .unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn finite_f64() -> impl Strategy<Value = f64> {
            any::<f64>().prop_filter("finite", |v| v.is_finite())
        }

        proptest! {
            /// Metrics survive a write/read cycle losslessly, including
            /// extreme finite floats.
            #[test]
            fn metrics_csv_round_trip(
                epoch in 0usize..1000,
                step in 0u64..100_000,
                recon in finite_f64(),
                prior in finite_f64(),
                objective in finite_f64(),
                kl in finite_f64(),
                elbo in finite_f64(),
                wall in 0u64..10_000,
                clamps in 0u64..1_000_000,
            ) {
                let rec = MetricsRecord {
                    epoch,
                    step,
                    recon_term: recon,
                    prior_term: prior,
                    objective,
                    aevb_kl: kl,
                    elbo_proxy: elbo,
                    wall_ms: wall,
                    clamp_count: clamps,
                };
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("m.csv");
                write_metrics_csv(&path, std::slice::from_ref(&rec)).unwrap();
                let back = read_metrics_csv(&path).unwrap();
                prop_assert_eq!(back.len(), 1);
                prop_assert_eq!(back[0].recon_term.to_bits(), rec.recon_term.to_bits());
                prop_assert_eq!(back[0].elbo_proxy.to_bits(), rec.elbo_proxy.to_bits());
                prop_assert_eq!(&back[0], &rec);
            }
        }
    }

    #[test]
    fn all_figure_kinds_parse_as_strict_xml() {
        let arch = Architecture::new(784, 2, vec![8], vec![8], Likelihood::Bernoulli).unwrap();
        let p = init_params(&arch, 3);
        let ds = crate::data::generate_synthetic_digits(70, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let embed_svg = dir.path().join("embed.svg");
        embed_scatter(
            &p,
            &ds.images,
            Some(&ds.labels),
            64,
            4,
            &embed_svg,
            &dir.path().join("embed.csv"),
        )
        .unwrap();
        let curves_svg = dir.path().join("curves.svg");
        training_curves(&[("run".into(), records(6))], 1, &curves_svg).unwrap();
        let recon_svg = dir.path().join("recon.svg");
        recon_strip(&p, &ds.images, None, &[0, 1], &recon_svg).unwrap();

        let sine_arch = Architecture::new(
            256,
            2,
            vec![8],
            vec![8],
            Likelihood::Gaussian { sigma: 0.1 },
        )
        .unwrap();
        let sp = init_params(&sine_arch, 3);
        let waves = crate::data::generate_sine(6, 2).unwrap();
        let wave_svg = dir.path().join("wave.svg");
        recon_strip(&sp, &waves.data, Some(&waves.meta), &[0, 3], &wave_svg).unwrap();

        for path in [embed_svg, curves_svg, recon_svg, wave_svg] {
            let text = std::fs::read_to_string(&path).unwrap();
            let doc = roxmltree::Document::parse(&text)
                .unwrap_or_else(|e| panic!("{}: not well-formed XML: {e}", path.display()));
            assert_eq!(doc.root_element().tag_name().name(), "svg");
        }
    }

    #[test]
    fn figures_are_deterministic() {
        let arch = Architecture::new(784, 2, vec![8], vec![8], Likelihood::Bernoulli).unwrap();
        let p = init_params(&arch, 3);
        let ds = crate::data::generate_synthetic_digits(70, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (s1, s2) = (dir.path().join("1.svg"), dir.path().join("2.svg"));
        let (c1, c2) = (dir.path().join("1.csv"), dir.path().join("2.csv"));
        embed_scatter(&p, &ds.images, Some(&ds.labels), 64, 4, &s1, &c1).unwrap();
        embed_scatter(&p, &ds.images, Some(&ds.labels), 64, 4, &s2, &c2).unwrap();
        assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());
        assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
    }
}
