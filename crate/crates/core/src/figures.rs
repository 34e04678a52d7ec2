//! Deterministic SVG charts built from the analysis CSVs.

use std::fmt::Write;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FigureError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("bad value `{value}` in column `{column}`")]
    BadValue { column: String, value: String },
    #[error("empty table")]
    Empty,
    #[error("malformed csv: {0}")]
    Csv(String),
}

/// A parsed CSV with a header row. Cells are kept as text.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Table, FigureError> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| FigureError::Csv(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.iter().all(String::is_empty) {
            return Err(FigureError::Empty);
        }
        let rows = reader
            .records()
            .map(|r| {
                r.map(|r| r.iter().map(str::to_string).collect())
                    .map_err(|e| FigureError::Csv(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize, FigureError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FigureError::MissingColumn(name.into()))
    }

    /// Columns whose name starts with `prefix`, in order.
    pub fn columns_with_prefix(&self, prefix: &str) -> Vec<usize> {
        (0..self.header.len())
            .filter(|&i| self.header[i].starts_with(prefix))
            .collect()
    }

    pub fn number(&self, row: usize, col: usize) -> Result<Option<f64>, FigureError> {
        let cell = self.rows[row].get(col).map(String::as_str).unwrap_or("");
        if cell.is_empty() {
            return Ok(None);
        }
        let v: f64 = cell.parse().map_err(|_| FigureError::BadValue {
            column: self.header[col].clone(),
            value: cell.into(),
        })?;
        Ok(v.is_finite().then_some(v))
    }
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Half-width of a shaded band around each point.
    pub band: Option<Vec<f64>>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Line chart with optional bands; the y axis spans `y_range`.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    y_range: (f64, f64),
) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    let (x0, x1) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let (x0, x1) = if x0.is_finite() && x1 > x0 {
        (x0, x1)
    } else {
        (0.0, 1.0)
    };
    let (y0, y1) = y_range;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y.clamp(y0, y1) - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (w - right + left) / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - bottom,
        w - right,
        h - bottom
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        h - bottom
    );
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/>"##,
            py(y),
            w - right
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.2}</text>"#,
            left - 6.0,
            py(y) + 4.0
        );
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#,
            px(x),
            h - bottom + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (w - right + left) / 2.0,
        h - 12.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (h - bottom + top) / 2.0,
        esc(y_label)
    );

    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if let Some(band) = &ser.band {
            let upper: Vec<String> = ser
                .points
                .iter()
                .zip(band)
                .map(|(p, b)| format!("{:.1},{:.1}", px(p.0), py(p.1 + b)))
                .collect();
            let lower: Vec<String> = ser
                .points
                .iter()
                .zip(band)
                .rev()
                .map(|(p, b)| format!("{:.1},{:.1}", px(p.0), py(p.1 - b)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
        }
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                px(p.0),
                py(p.1)
            );
        }
        let ly = top + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{ly}" width="12" height="12" fill="{color}"/>"#,
            w - right + 12.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            w - right + 30.0,
            ly + 10.0,
            esc(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap with printed cell values; `None` cells are left blank.
pub fn heatmap(
    title: &str,
    rows: &[String],
    cols: &[String],
    values: &[Vec<Option<f64>>],
    decimals: usize,
) -> String {
    let cell_w = 64.0f64.max(8.0 * decimals as f64 + 24.0);
    let cell_h = 26.0;
    let left = 12.0 + 7.5 * rows.iter().map(|r| r.len()).max().unwrap_or(4) as f64;
    let top = 60.0;
    let w = left + cell_w * cols.len() as f64 + 20.0;
    let h = top + cell_h * rows.len() as f64 + 20.0;
    let all: Vec<f64> = values.iter().flatten().flatten().copied().collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = all
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(lo + 1e-12);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        esc(title)
    );
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            left + cell_w * (j as f64 + 0.5),
            top - 8.0,
            esc(c)
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let y = top + cell_h * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + cell_h * 0.65,
            esc(r)
        );
        for (j, v) in values[i].iter().enumerate() {
            let x = left + cell_w * j as f64;
            match v {
                Some(v) => {
                    let t = (v - lo) / (hi - lo);
                    // white to dark blue
                    let (rr, gg, bb) = (255.0 - 225.0 * t, 255.0 - 175.0 * t, 255.0 - 75.0 * t);
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x:.1}" y="{y:.1}" width="{cell_w:.1}" height="{cell_h:.1}" fill="rgb({:.0},{:.0},{:.0})" stroke="white"/>"#,
                        rr, gg, bb
                    );
                    let ink = if t > 0.55 { "white" } else { "black" };
                    let _ = writeln!(
                        s,
                        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{ink}">{v:.decimals$}</text>"#,
                        x + cell_w / 2.0,
                        y + cell_h * 0.65
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        r##"<rect x="{x:.1}" y="{y:.1}" width="{cell_w:.1}" height="{cell_h:.1}" fill="#f4f4f4" stroke="white"/>"##
                    );
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Extraction CSV (`component,layer,mean,variance,...`) to a line chart
/// with one-standard-deviation bands.
pub fn extraction_figure(csv: &str) -> Result<String, FigureError> {
    let t = Table::parse(csv)?;
    let (ci, li, mi, vi) = (
        t.column("component")?,
        t.column("layer")?,
        t.column("mean")?,
        t.column("variance")?,
    );
    let mut series: Vec<Series> = Vec::new();
    for r in 0..t.rows.len() {
        let name = t.rows[r][ci].clone();
        let layer = t.number(r, li)?.unwrap_or(0.0);
        let mean = t.number(r, mi)?.unwrap_or(0.0);
        let sd = t.number(r, vi)?.unwrap_or(0.0).max(0.0).sqrt();
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => {
                s.points.push((layer, mean));
                s.band.as_mut().unwrap().push(sd);
            }
            None => series.push(Series {
                name,
                points: vec![(layer, mean)],
                band: Some(vec![sd]),
            }),
        }
    }
    Ok(line_chart(
        "Extraction rate at the last token",
        "layer",
        "rate",
        &series,
        (0.0, 1.0),
    ))
}

fn grid(
    t: &Table,
    label_col: usize,
    value_cols: &[usize],
) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>), FigureError> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for r in 0..t.rows.len() {
        labels.push(t.rows[r][label_col].clone());
        values.push(
            value_cols
                .iter()
                .map(|&c| t.number(r, c))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok((labels, values))
}

/// Flow CSV (`chunk,layer_1,...`) to a chunk x layer heatmap.
pub fn flow_figure(csv: &str, title: &str) -> Result<String, FigureError> {
    let t = Table::parse(csv)?;
    let lc = t.column("chunk")?;
    let cols = t.columns_with_prefix("layer_");
    if cols.is_empty() {
        return Err(FigureError::MissingColumn("layer_1".into()));
    }
    let (rows, mut values) = grid(&t, lc, &cols)?;
    // Display in units of 1e-3 so small saliencies stay legible.
    values
        .iter_mut()
        .flatten()
        .flatten()
        .for_each(|v| *v *= 1e3);
    let names: Vec<String> = cols
        .iter()
        .map(|&c| t.header[c].trim_start_matches("layer_").to_string())
        .collect();
    Ok(heatmap(
        &format!("{title} (x1e-3)"),
        &rows,
        &names,
        &values,
        2,
    ))
}

/// Impact CSV (`step,baseline,visible_1,...`) to a lower-triangular heatmap.
pub fn impact_figure(csv: &str) -> Result<String, FigureError> {
    let t = Table::parse(csv)?;
    let sc = t.column("step")?;
    let cols = t.columns_with_prefix("visible_");
    if cols.is_empty() {
        return Err(FigureError::MissingColumn("visible_1".into()));
    }
    let (rows, values) = grid(&t, sc, &cols)?;
    let rows: Vec<String> = rows.iter().map(|r| format!("step {r}")).collect();
    let names: Vec<String> = cols
        .iter()
        .map(|&c| t.header[c].trim_start_matches("visible_").to_string())
        .collect();
    Ok(heatmap(
        "Single-step impact (rows: predicted step, cols: visible step)",
        &rows,
        &names,
        &values,
        3,
    ))
}

/// Future-matrix CSV (`future_step,step_1,...`) to a heatmap.
pub fn future_figure(csv: &str, title: &str) -> Result<String, FigureError> {
    let t = Table::parse(csv)?;
    let fc = t.column("future_step")?;
    let cols = t.columns_with_prefix("step_");
    if cols.is_empty() {
        return Err(FigureError::MissingColumn("step_1".into()));
    }
    let (rows, values) = grid(&t, fc, &cols)?;
    let rows: Vec<String> = rows.iter().map(|r| format!("step {r}")).collect();
    let names: Vec<String> = cols
        .iter()
        .map(|&c| t.header[c].trim_start_matches("step_").to_string())
        .collect();
    Ok(heatmap(title, &rows, &names, &values, 2))
}

/// Probe CSV to score-versus-layer curves, one per chunk, for one task and
/// kind (non-control rows only).
pub fn probe_figure(csv: &str, task: &str, kind: &str, title: &str) -> Result<String, FigureError> {
    let t = Table::parse(csv)?;
    let (tc, kc, cc, lc, ctl, sc) = (
        t.column("task")?,
        t.column("kind")?,
        t.column("chunk")?,
        t.column("layer")?,
        t.column("control")?,
        t.column("score")?,
    );
    let mut series: Vec<Series> = Vec::new();
    for r in 0..t.rows.len() {
        let row = &t.rows[r];
        if row[tc] != task || row[kc] != kind || row[ctl] != "false" {
            continue;
        }
        let (Some(layer), Some(score)) = (t.number(r, lc)?, t.number(r, sc)?) else {
            continue;
        };
        match series.iter_mut().find(|s| s.name == row[cc]) {
            Some(s) => s.points.push((layer, score)),
            None => series.push(Series {
                name: row[cc].clone(),
                points: vec![(layer, score)],
                band: None,
            }),
        }
    }
    Ok(line_chart(title, "layer", "score", &series, (0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_chart_has_three_lines() {
        let csv = "component,layer,mean,variance\nmhsa,1,0.2,0.01\nmhsa,2,0.5,0.0\nmlp,1,0.1,0\nmlp,2,0.3,0\nlayer_out,1,0.4,0\nlayer_out,2,1,0\n";
        let svg = extraction_figure(csv).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert_eq!(svg.matches("<polygon").count(), 3);
        assert_eq!(svg, extraction_figure(csv).unwrap());
    }

    #[test]
    fn flow_heatmap_prints_values() {
        let csv = "chunk,layer_1,layer_2\ngoal_state,0.001,0.002\nlast_token,0.0005,0\n";
        let svg = flow_figure(csv, "step 1").unwrap();
        assert!(svg.contains(">2.00<"));
        assert!(svg.contains(">0.50<"));
    }

    #[test]
    fn impact_heatmap_blank_upper_triangle() {
        let csv = "step,baseline,visible_1,visible_2\n2,0.3,0.1,\n3,0.2,0.05,0.2\n";
        let svg = impact_figure(csv).unwrap();
        assert_eq!(svg.matches("#f4f4f4").count(), 1);
    }

    #[test]
    fn missing_column_reported() {
        assert_eq!(
            extraction_figure("layer,mean\n1,0.5\n").unwrap_err(),
            FigureError::MissingColumn("component".into())
        );
        assert_eq!(
            impact_figure("step,baseline\n2,0.1\n").unwrap_err(),
            FigureError::MissingColumn("visible_1".into())
        );
    }
}
