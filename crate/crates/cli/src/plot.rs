//! Static SVG line charts from CSV columns. No display dependency; the
//! output is a plain `<svg>` with one polyline per selected column.

use std::path::Path;

use anyhow::{bail, Result};

use crate::csvlog::{read_csv, CsvTable};

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Render the named columns of a CSV (x axis = `step` column when present,
/// row index otherwise) into an SVG file.
pub fn plot_csv(csv_path: &Path, columns: &[String], out_path: &Path) -> Result<()> {
    let table = read_csv(csv_path)?;
    if columns.is_empty() {
        bail!("plot: no columns selected");
    }
    let svg = render_svg(&table, columns)?;
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out_path, svg)?;
    Ok(())
}

fn render_svg(table: &CsvTable, columns: &[String]) -> Result<String> {
    let x: Vec<f64> = if table.columns.iter().any(|c| c == "step") {
        table.numeric_column("step")?
    } else {
        (0..table.rows.len()).map(|i| i as f64).collect()
    };
    if x.is_empty() {
        bail!("plot: csv has no data rows");
    }
    let mut series = Vec::new();
    for name in columns {
        series.push((name.clone(), table.numeric_column(name)?));
    }

    let (x_min, x_max) = finite_range(&x);
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, ys) in &series {
        for &v in ys.iter().filter(|v| v.is_finite()) {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
    }
    if !y_min.is_finite() {
        bail!("plot: selected columns contain no finite values");
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let x_span = (x_max - x_min).max(1e-12);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |v: f64| MARGIN_L + (v - x_min) / x_span * plot_w;
    let sy = |v: f64| MARGIN_T + (1.0 - (v - y_min) / (y_max - y_min)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B
    ));
    // axis labels
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let xv = x_min + frac * x_span;
        let yv = y_min + frac * (y_max - y_min);
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            sx(xv),
            HEIGHT - MARGIN_B + 16.0,
            trim_number(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            sy(yv) + 4.0,
            trim_number(yv)
        ));
    }
    // polylines; NaN breaks the line
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for (xv, yv) in x.iter().zip(ys.iter()) {
            if yv.is_finite() {
                segments.last_mut().unwrap().push((sx(*xv), sy(*yv)));
            } else if !segments.last().unwrap().is_empty() {
                segments.push(Vec::new());
            }
        }
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            let points: Vec<String> = seg.iter().map(|(a, b)| format!("{a:.1},{b:.1}")).collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                points.join(" ")
            ));
        }
        // legend
        let ly = MARGIN_T + 18.0 * i as f64 + 10.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
            WIDTH - MARGIN_R + 10.0,
            WIDTH - MARGIN_R + 34.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{name}</text>\n",
            WIDTH - MARGIN_R + 40.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn finite_range(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter().filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn trim_number(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_row_csv_renders_one_polyline_per_column() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("m.csv");
        std::fs::write(&csv, "step,loss_total,r1_i2t\n0,4.0,0.1\n20,2.0,0.5\n").unwrap();
        let out = dir.path().join("m.svg");
        plot_csv(
            &csv,
            &["loss_total".to_string(), "r1_i2t".to_string()],
            &out,
        )
        .unwrap();
        let svg = std::fs::read_to_string(&out).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("loss_total") && svg.contains("r1_i2t"));
    }

    #[test]
    fn nan_breaks_polyline() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("m.csv");
        std::fs::write(&csv, "step,a\n0,1.0\n1,NaN\n2,2.0\n3,3.0\n").unwrap();
        let out = dir.path().join("m.svg");
        plot_csv(&csv, &["a".to_string()], &out).unwrap();
        let svg = std::fs::read_to_string(&out).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn missing_column_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("m.csv");
        std::fs::write(&csv, "step,a\n0,1.0\n").unwrap();
        let out = dir.path().join("m.svg");
        assert!(plot_csv(&csv, &["nope".to_string()], &out).is_err());
    }
}
