//! Deterministic SVG charts for run artifacts: a line per loss component
//! for history CSVs, horizontal bars of novel ACC for grid CSVs.

use std::path::Path;
use std::process::ExitCode;

use ncdlab_core::error::{Error, Result};
use ncdlab_core::losses::LossReport;

const PALETTE: [&str; 5] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];

pub fn cmd_plot(input: &Path, out: &Path) -> std::result::Result<ExitCode, Error> {
    let text = std::fs::read_to_string(input)?;
    let svg = render(&text)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, svg)?;
    Ok(ExitCode::SUCCESS)
}

/// Render a history or grid CSV to SVG; the chart type is picked from the
/// header line.
pub fn render(text: &str) -> Result<String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty CSV".into()))?;
    let rows: Vec<&str> = lines.collect();
    if rows.is_empty() {
        return Err(Error::Parse("CSV has a header but no data rows".into()));
    }
    if header == LossReport::CSV_HEADER {
        render_history(&rows)
    } else if header.starts_with("axis,cell,") {
        render_grid(header, &rows)
    } else {
        Err(Error::Parse(format!(
            "unrecognized CSV header for plotting: {header}"
        )))
    }
}

fn parse_f64(field: &str, line: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("bad number {field} in row: {line}")))
}

fn render_history(rows: &[&str]) -> Result<String> {
    // Columns: epoch,step,branch,ce,H,mse,kl,var,total
    let names = ["ce", "H", "mse", "kl", "var"];
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); 5];
    for line in rows {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Parse(format!("bad history row: {line}")));
        }
        match fields[2] {
            "labeled" => series[0].push(parse_f64(fields[3], line)?),
            "unlabeled" => {
                for (slot, idx) in [(1usize, 4usize), (2, 5), (3, 6), (4, 7)] {
                    series[slot].push(parse_f64(fields[idx], line)?);
                }
            }
            other => return Err(Error::Parse(format!("unknown branch {other}"))),
        }
    }
    if series.iter().all(|s| s.is_empty()) {
        return Err(Error::Parse("history CSV contains no loss rows".into()));
    }

    let (w, h) = (860.0, 480.0);
    let (left, right, top, bottom) = (60.0, 150.0, 20.0, 40.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let n = series.iter().map(|s| s.len()).max().unwrap_or(1);
    let y_max = series
        .iter()
        .flat_map(|s| s.iter())
        .fold(0.0_f64, |a, &b| a.max(b))
        .max(1e-12);

    let mut svg = svg_open(w, h);
    svg.push_str(&axes_box(left, top, plot_w, plot_h));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{:.4}</text>\n",
        left - 5.0,
        top + 10.0,
        y_max
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">0</text>\n",
        left - 5.0,
        top + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">optimizer step</text>\n",
        left + plot_w / 2.0,
        h - 10.0
    ));

    for (i, (serie, name)) in series.iter().zip(names).enumerate() {
        if serie.is_empty() {
            continue;
        }
        let color = PALETTE[i];
        let points: Vec<String> = serie
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let x = left + plot_w * (j as f64) / ((n.max(2) - 1) as f64);
                let y = top + plot_h * (1.0 - v / y_max);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = top + 20.0 + 18.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            w - right + 10.0,
            ly - 10.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{name}</text>\n",
            w - right + 28.0,
            ly
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn render_grid(header: &str, rows: &[&str]) -> Result<String> {
    let columns: Vec<&str> = header.split(',').collect();
    let find = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Parse(format!("grid CSV missing column {name}")))
    };
    let axis_col = find("axis")?;
    let cell_col = find("cell")?;
    let acc_col = find("novel_acc_mean")?;

    struct Bar {
        label: String,
        value: Option<f64>,
    }
    let mut bars = Vec::new();
    for line in rows {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Parse(format!("bad grid row: {line}")));
        }
        let value = if fields[acc_col].is_empty() {
            None
        } else {
            Some(parse_f64(fields[acc_col], line)?)
        };
        bars.push(Bar {
            label: format!("{}:{}", fields[axis_col], fields[cell_col]),
            value,
        });
    }

    let row_h = 28.0;
    let (left, top) = (220.0, 20.0);
    let bar_w = 420.0;
    let w = left + bar_w + 80.0;
    let h = top + row_h * bars.len() as f64 + 30.0;
    let mut svg = svg_open(w, h);
    for (i, bar) in bars.iter().enumerate() {
        let y = top + row_h * i as f64;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            left - 8.0,
            y + row_h * 0.65,
            xml_escape(&bar.label)
        ));
        match bar.value {
            Some(v) => {
                let width = bar_w * v.clamp(0.0, 1.0);
                svg.push_str(&format!(
                    "<rect x=\"{left:.1}\" y=\"{:.1}\" width=\"{width:.2}\" height=\"{:.1}\" fill=\"{}\"/>\n",
                    y + row_h * 0.15,
                    row_h * 0.7,
                    PALETTE[0]
                ));
                svg.push_str(&format!(
                    "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{v:.3}</text>\n",
                    left + width + 6.0,
                    y + row_h * 0.65
                ));
            }
            None => {
                svg.push_str(&format!(
                    "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"#888\">n/a</text>\n",
                    left + 6.0,
                    y + row_h * 0.65
                ));
            }
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"monospace\">\n\
         <rect width=\"{w:.0}\" height=\"{h:.0}\" fill=\"white\"/>\n"
    )
}

fn axes_box(left: f64, top: f64, plot_w: f64, plot_h: f64) -> String {
    format!(
        "<rect x=\"{left:.1}\" y=\"{top:.1}\" width=\"{plot_w:.1}\" height=\"{plot_h:.1}\" \
         fill=\"none\" stroke=\"#333\" stroke-width=\"1\"/>\n"
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_render_has_component_lines() {
        let csv = "epoch,step,branch,ce,H,mse,kl,var,total\n\
                   0,0,labeled,1.0,0,0,0,0,1.5\n\
                   0,0,unlabeled,0,1.3,0.1,0.7,0.5,2.6\n\
                   0,1,labeled,0.9,0,0,0,0,1.35\n\
                   0,1,unlabeled,0,1.2,0.1,0.6,0.45,2.35\n";
        let svg = render(csv).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 5);
        assert!(svg.contains(">ce<"));
        assert!(svg.contains(">var<"));
        assert_eq!(render(csv).unwrap(), svg);
    }

    #[test]
    fn grid_render_draws_bars() {
        let csv = "axis,cell,seeds,labeled_acc_mean,labeled_acc_sd,novel_acc_mean,novel_acc_sd,status\n\
                   loss-components,full,3,0.99,0.01,0.95,0.02,ok\n\
                   loss-components,ce,3,0.98,0.01,0.40,0.05,ok\n\
                   loss-components,broken,0,,,,,error: nope\n";
        let svg = render(csv).unwrap();
        assert_eq!(svg.matches("<rect").count(), 1 + 2);
        assert!(svg.contains("loss-components:full"));
        assert!(svg.contains("n/a"));
    }

    #[test]
    fn empty_body_is_rejected() {
        assert!(render("").is_err());
        assert!(render("epoch,step,branch,ce,H,mse,kl,var,total\n").is_err());
        assert!(render("what,is,this\n1,2,3\n").is_err());
    }
}
