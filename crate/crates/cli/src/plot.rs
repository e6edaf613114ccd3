use crate::svg::{diverging, normalized, Svg};
use anyhow::{bail, ensure, Context, Result};
use attrib_core::attribution::{InputRelevance, RelevanceResult};
use attrib_core::results::{
    aggregate_channels, read_records_csv, read_records_jsonl, result_from_records, summarize,
    ChannelAggregation, Preprocess,
};
use attrib_core::tensor::Tensor;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Kind {
    Bar,
    Heatmap,
    Boxplot,
}

#[derive(clap::Args)]
pub struct Args {
    /// Record file written by `attrib attribute` (.csv or .jsonl).
    pub records: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// SVG file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// 1-based input layer to plot.
    #[arg(long = "input-idx", default_value_t = 1)]
    pub input_idx: usize,
    /// 1-based instances, e.g. `1,4`. Default: the first instance for bar
    /// and heatmap, all instances for boxplot.
    #[arg(long = "data-idx")]
    pub data_idx: Option<String>,
    /// 1-based positions among the outputs in the file. Default: all.
    #[arg(long = "output-idx")]
    pub output_idx: Option<String>,
    /// How image channels are combined: sum, mean or l2norm.
    #[arg(long = "aggr-channels", default_value = "sum")]
    pub aggr_channels: String,
    /// Use one colour or axis scale for every panel.
    #[arg(long = "same-scale")]
    pub same_scale: bool,
    /// Boxplot only: instance drawn over the summary.
    #[arg(long = "ref-data-idx")]
    pub ref_data_idx: Option<usize>,
    /// Boxplot of image inputs only: quantile drawn per pixel.
    #[arg(long)]
    pub quantile: Option<f64>,
    /// Boxplot only: abs, identity or square.
    #[arg(long, default_value = "abs")]
    pub preprocess: String,
}

const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 40.0;
const TITLE_H: f64 = 24.0;
const LABEL_W: f64 = 90.0;

/// Parses a 1-based comma-separated list into 0-based indices below `n`.
fn parse_indices(s: &str, n: usize, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            let i: usize = p
                .trim()
                .parse()
                .with_context(|| format!("invalid {what} index `{p}`"))?;
            ensure!(i >= 1 && i <= n, "{what} index {i} out of range 1..={n}");
            Ok(i - 1)
        })
        .collect()
}

fn read_result(args: &Args) -> Result<RelevanceResult> {
    let f = File::open(&args.records)
        .with_context(|| format!("reading `{}`", args.records.display()))?;
    let r = BufReader::new(f);
    let records = match args.records.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("ndjson") => read_records_jsonl(r)?,
        _ => read_records_csv(r)?,
    };
    Ok(result_from_records(&records)?)
}

/// Keeps only the outputs `ks`, in that order.
fn keep_outputs(result: &RelevanceResult, ks: &[usize]) -> Result<RelevanceResult> {
    let n = result.outputs.len();
    let inputs = result
        .inputs
        .iter()
        .map(|r| {
            let mut shape = r.values.shape().to_vec();
            *shape.last_mut().expect("relevance has an output axis") = ks.len();
            let data = r
                .values
                .data()
                .chunks(n)
                .flat_map(|c| ks.iter().map(move |&k| c[k]))
                .collect();
            Ok(InputRelevance {
                layer_id: r.layer_id.clone(),
                axis_names: r.axis_names.clone(),
                values: Tensor::new(shape, data, r.values.precision())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RelevanceResult {
        inputs,
        instance_ids: result.instance_ids.clone(),
        outputs: ks.iter().map(|&k| result.outputs[k].clone()).collect(),
        method: result.method.clone(),
    })
}

/// Values of entry-major relevance `row` for output `k` of `n`.
fn column(row: &[f64], k: usize, n: usize) -> Vec<f64> {
    row.iter().skip(k).step_by(n).copied().collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn run(args: &Args) -> Result<()> {
    let result = read_result(args)?;
    let ks = match &args.output_idx {
        Some(s) => parse_indices(s, result.outputs.len(), "output")?,
        None => (0..result.outputs.len()).collect(),
    };
    let mut result = keep_outputs(&result, &ks)?;
    ensure!(
        args.input_idx >= 1 && args.input_idx <= result.inputs.len(),
        "input index {} out of range 1..={}",
        args.input_idx,
        result.inputs.len()
    );
    let input = args.input_idx - 1;
    let batch = result.batch_size();
    let instances = match (&args.data_idx, args.kind) {
        (Some(s), _) => parse_indices(s, batch, "instance")?,
        (None, Kind::Boxplot) => (0..batch).collect(),
        (None, _) => vec![0],
    };
    if args.kind != Kind::Boxplot {
        ensure!(
            args.ref_data_idx.is_none(),
            "--ref-data-idx applies to boxplot only"
        );
        ensure!(
            args.quantile.is_none(),
            "--quantile applies to boxplot only"
        );
    }
    let rank = result.inputs[input].values.rank();
    if rank == 5 {
        let mode: ChannelAggregation = args.aggr_channels.parse()?;
        result = aggregate_channels(&result, mode)?;
    }
    let r = &result.inputs[input];
    let svg = match (args.kind, r.values.rank()) {
        (Kind::Bar, 3) => bar(&result, input, &instances, args.same_scale),
        (Kind::Bar, _) => bail!("bar plots need tabular input; use --kind heatmap for images"),
        (Kind::Heatmap, 4) => heatmap(&result, input, &instances, args.same_scale),
        (Kind::Heatmap, _) => bail!("heatmaps need image input; use --kind bar for tabular data"),
        (Kind::Boxplot, rank) => {
            let preprocess: Preprocess = args.preprocess.parse()?;
            let reference = args
                .ref_data_idx
                .map(|i| parse_indices(&i.to_string(), batch, "reference"))
                .transpose()?;
            let reference = reference.map(|v| v[0]);
            if rank == 3 {
                ensure!(
                    args.quantile.is_none(),
                    "--quantile applies to image inputs only"
                );
                boxplot_tabular(
                    &result,
                    input,
                    &instances,
                    preprocess,
                    reference,
                    args.same_scale,
                )?
            } else {
                let q = args.quantile.unwrap_or(0.5);
                boxplot_image(
                    &result,
                    input,
                    &instances,
                    q,
                    preprocess,
                    reference,
                    args.same_scale,
                )?
            }
        }
    };
    std::fs::write(&args.out, svg).with_context(|| format!("writing `{}`", args.out.display()))?;
    Ok(())
}

fn bar(result: &RelevanceResult, input: usize, instances: &[usize], same_scale: bool) -> String {
    let r = &result.inputs[input];
    let n = result.outputs.len();
    let features = &r.axis_names[0];
    let panels: Vec<Vec<Vec<f64>>> = instances
        .iter()
        .map(|&b| (0..n).map(|k| column(r.values.row(b), k, n)).collect())
        .collect();
    let global = panels
        .iter()
        .flatten()
        .map(|v| max_abs(v))
        .fold(0.0, f64::max);
    let bar_h = ((PANEL_H - TITLE_H) / features.len() as f64).min(24.0);
    let mut svg = Svg::new(
        2.0 * MARGIN + n as f64 * (LABEL_W + PANEL_W),
        2.0 * MARGIN + instances.len() as f64 * (PANEL_H + MARGIN),
    );
    for (row, &b) in instances.iter().enumerate() {
        for k in 0..n {
            let values = &panels[row][k];
            let scale = if same_scale { global } else { max_abs(values) };
            let x0 = MARGIN + k as f64 * (LABEL_W + PANEL_W) + LABEL_W;
            let y0 = MARGIN + row as f64 * (PANEL_H + MARGIN);
            let title = format!("{} | {}", result.instance_ids[b], result.outputs[k].label);
            svg.text(x0 + PANEL_W / 2.0, y0 + 14.0, 12.0, "middle", &title);
            let zero_x = x0 + PANEL_W / 2.0;
            let half = PANEL_W / 2.0 - 4.0;
            for (i, v) in values.iter().enumerate() {
                let t = normalized(*v, scale);
                let y = y0 + TITLE_H + i as f64 * bar_h;
                let len = t.abs() * half;
                let x = if t < 0.0 { zero_x - len } else { zero_x };
                let fill = diverging(t.signum());
                svg.rect(x, y + 2.0, len, bar_h - 4.0, &fill, None, "bar");
                svg.text(x0 - 6.0, y + bar_h / 2.0 + 4.0, 10.0, "end", &features[i]);
            }
            svg.line(
                zero_x,
                y0 + TITLE_H,
                zero_x,
                y0 + TITLE_H + features.len() as f64 * bar_h,
                "#000000",
            );
            svg.text(
                x0 + PANEL_W,
                y0 + PANEL_H + 12.0,
                9.0,
                "end",
                &format!("max |R| = {scale:.3e}"),
            );
        }
    }
    svg.finish()
}

/// Draws one heatmap panel of `[h, w]` values scaled by `scale`.
fn heat_panel(
    svg: &mut Svg,
    x0: f64,
    y0: f64,
    title: &str,
    values: &[f64],
    h: usize,
    w: usize,
    scale: f64,
) {
    svg.text(x0 + PANEL_W / 2.0, y0 + 14.0, 12.0, "middle", title);
    let side = ((PANEL_H - TITLE_H) / h as f64).min(PANEL_W / w as f64);
    for y in 0..h {
        for x in 0..w {
            let fill = diverging(normalized(values[y * w + x], scale));
            svg.rect(
                x0 + x as f64 * side,
                y0 + TITLE_H + y as f64 * side,
                side,
                side,
                &fill,
                None,
                "cell",
            );
        }
    }
    svg.rect(
        x0,
        y0 + TITLE_H,
        side * w as f64,
        side * h as f64,
        "none",
        Some("#000000"),
        "",
    );
}

fn heatmap(
    result: &RelevanceResult,
    input: usize,
    instances: &[usize],
    same_scale: bool,
) -> String {
    let r = &result.inputs[input];
    let n = result.outputs.len();
    let (h, w) = (r.values.shape()[1], r.values.shape()[2]);
    let panels: Vec<Vec<Vec<f64>>> = instances
        .iter()
        .map(|&b| (0..n).map(|k| column(r.values.row(b), k, n)).collect())
        .collect();
    let global = panels
        .iter()
        .flatten()
        .map(|v| max_abs(v))
        .fold(0.0, f64::max);
    let mut svg = Svg::new(
        MARGIN + n as f64 * (PANEL_W + MARGIN),
        MARGIN + instances.len() as f64 * (PANEL_H + MARGIN),
    );
    for (row, &b) in instances.iter().enumerate() {
        for k in 0..n {
            let values = &panels[row][k];
            let scale = if same_scale { global } else { max_abs(values) };
            let title = format!("{} | {}", result.instance_ids[b], result.outputs[k].label);
            let x0 = MARGIN + k as f64 * (PANEL_W + MARGIN);
            let y0 = MARGIN + row as f64 * (PANEL_H + MARGIN);
            heat_panel(&mut svg, x0, y0, &title, values, h, w, scale);
        }
    }
    svg.finish()
}

fn boxplot_tabular(
    result: &RelevanceResult,
    input: usize,
    instances: &[usize],
    preprocess: Preprocess,
    reference: Option<usize>,
    same_scale: bool,
) -> Result<String> {
    let table = summarize(result, input, instances, 0.5, preprocess, reference)?;
    let n = result.outputs.len();
    let features = &result.inputs[input].axis_names[0];
    let range = |k: usize| {
        let cells = table.cells.iter().skip(k).step_by(n);
        cells.fold((0.0f64, 0.0f64), |(lo, hi), c| {
            let r = c.reference.map(|v| preprocess.apply(v));
            (
                lo.min(c.min).min(r.unwrap_or(lo)),
                hi.max(c.max).max(r.unwrap_or(hi)),
            )
        })
    };
    let global = (0..n)
        .map(range)
        .fold((0.0f64, 0.0f64), |(a, b), (c, d)| (a.min(c), b.max(d)));
    let box_h = ((PANEL_H - TITLE_H) / features.len() as f64).min(24.0);
    let mut svg = Svg::new(
        2.0 * MARGIN + n as f64 * (LABEL_W + PANEL_W),
        2.0 * MARGIN + PANEL_H + MARGIN,
    );
    for k in 0..n {
        let (lo, hi) = if same_scale { global } else { range(k) };
        let span = if hi > lo { hi - lo } else { 1.0 };
        let x0 = MARGIN + k as f64 * (LABEL_W + PANEL_W) + LABEL_W;
        let y0 = MARGIN;
        let px = |v: f64| x0 + 4.0 + (v - lo) / span * (PANEL_W - 8.0);
        let title = format!(
            "{} ({} instances)",
            result.outputs[k].label,
            instances.len()
        );
        svg.text(x0 + PANEL_W / 2.0, y0 + 14.0, 12.0, "middle", &title);
        for (i, feature) in features.iter().enumerate() {
            let c = &table.cells[i * n + k];
            let y = y0 + TITLE_H + i as f64 * box_h;
            let mid = y + box_h / 2.0;
            svg.line(px(c.min), mid, px(c.max), mid, "#000000");
            svg.rect(
                px(c.q25),
                y + 3.0,
                px(c.q75) - px(c.q25),
                box_h - 6.0,
                "#d0d8e8",
                Some("#000000"),
                "box",
            );
            svg.line(
                px(c.median),
                y + 3.0,
                px(c.median),
                y + box_h - 3.0,
                "#000000",
            );
            if let Some(v) = c.reference {
                svg.circle(px(preprocess.apply(v)), mid, 3.5, "#e00000", "ref");
            }
            svg.text(x0 - 6.0, mid + 4.0, 10.0, "end", feature);
        }
        svg.text(x0, y0 + PANEL_H + 12.0, 9.0, "start", &format!("{lo:.3e}"));
        svg.text(
            x0 + PANEL_W,
            y0 + PANEL_H + 12.0,
            9.0,
            "end",
            &format!("{hi:.3e}"),
        );
    }
    if let Some(b) = reference {
        svg.text(
            MARGIN,
            2.0 * MARGIN + PANEL_H + 20.0,
            10.0,
            "start",
            &format!("reference: {}", result.instance_ids[b]),
        );
    }
    Ok(svg.finish())
}

fn boxplot_image(
    result: &RelevanceResult,
    input: usize,
    instances: &[usize],
    q: f64,
    preprocess: Preprocess,
    reference: Option<usize>,
    same_scale: bool,
) -> Result<String> {
    let table = summarize(result, input, instances, q, preprocess, reference)?;
    let n = result.outputs.len();
    let shape = result.inputs[input].values.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut rows: Vec<(String, Vec<Vec<f64>>)> = vec![(
        format!("q{q}"),
        (0..n)
            .map(|k| {
                table
                    .cells
                    .iter()
                    .skip(k)
                    .step_by(n)
                    .map(|c| c.quantile)
                    .collect()
            })
            .collect(),
    )];
    if let Some(b) = reference {
        rows.push((
            result.instance_ids[b].clone(),
            (0..n)
                .map(|k| {
                    table
                        .cells
                        .iter()
                        .skip(k)
                        .step_by(n)
                        .map(|c| preprocess.apply(c.reference.unwrap_or(0.0)))
                        .collect()
                })
                .collect(),
        ));
    }
    let global = rows
        .iter()
        .flat_map(|(_, p)| p)
        .map(|v| max_abs(v))
        .fold(0.0, f64::max);
    let mut svg = Svg::new(
        MARGIN + n as f64 * (PANEL_W + MARGIN),
        MARGIN + rows.len() as f64 * (PANEL_H + MARGIN),
    );
    for (row, (name, panels)) in rows.iter().enumerate() {
        for (k, values) in panels.iter().enumerate() {
            let scale = if same_scale { global } else { max_abs(values) };
            let title = format!("{name} | {}", result.outputs[k].label);
            let x0 = MARGIN + k as f64 * (PANEL_W + MARGIN);
            let y0 = MARGIN + row as f64 * (PANEL_H + MARGIN);
            heat_panel(&mut svg, x0, y0, &title, values, h, w, scale);
        }
    }
    Ok(svg.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_are_one_based() {
        assert_eq!(parse_indices("1, 3", 3, "x").unwrap(), vec![0, 2]);
        assert!(parse_indices("0", 3, "x").is_err());
        assert!(parse_indices("4", 3, "x").is_err());
    }
}
