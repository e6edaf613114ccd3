use super::naive::{naive_forward, naive_linear, naive_resume, NaiveTrace};
use crate::error::Result;
use crate::forward::OutputSelection;
use crate::model::{Dataset, LayerOp, ModelGraph};
use crate::tensor::{Precision, Tensor};

/// How many times the step is shrunk by 10 when x ± h crosses a ReLU kink
/// or changes a max-pooling winner.
const MAX_SHRINK: usize = 4;

fn selected(t: &NaiveTrace, selection: &OutputSelection) -> Vec<f64> {
    selection
        .entries
        .iter()
        .map(|e| {
            if selection.use_pre_activation {
                t.z[e.layer][e.node]
            } else {
                t.y[e.layer][e.node]
            }
        })
        .collect()
}

/// For an input read only by one Dense or Conv2D layer, the change of that
/// layer's pre-activation per unit change of each input entry, as sparse
/// `(index, weight)` lists. Probes then update the layer instead of
/// recomputing it.
fn input_columns(graph: &ModelGraph, input: usize) -> Option<(usize, Vec<Vec<(usize, f64)>>)> {
    let li = graph.input_layers()[input];
    let &[c] = graph.consumers(li) else {
        return None;
    };
    if graph.inbound(c) != [li]
        || !matches!(
            graph.layer(c).op,
            LayerOp::Dense { .. } | LayerOp::Conv2D { .. }
        )
    {
        return None;
    }
    let len: usize = graph.shape(li).iter().product();
    let mut onehot = vec![0.0; len];
    let cols = (0..len)
        .map(|e| {
            onehot[e] = 1.0;
            let z = naive_linear(graph, c, &onehot);
            onehot[e] = 0.0;
            z.into_iter()
                .enumerate()
                .filter(|&(_, v)| v != 0.0)
                .collect()
        })
        .collect();
    Some((c, cols))
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every input
/// entry and selected output, laid out like attribution results:
/// one `[batch, input shape..., n_selected]` tensor per input layer.
///
/// If either probe lands on a different linear piece than `x` (another ReLU
/// sign pattern or max-pooling winner) the step is divided by 10, up to
/// four times; after that the one-sided difference on the side that stays on
/// `x`'s piece is used.
pub fn finite_diff_gradient(
    graph: &ModelGraph,
    data: &Dataset,
    selection: &OutputSelection,
    h: f64,
) -> Result<Vec<Tensor>> {
    let n_sel = selection.len();
    let mut out: Vec<Vec<f64>> = data
        .inputs()
        .iter()
        .map(|x| vec![0.0; x.len() * n_sel])
        .collect();
    let columns: Vec<_> = (0..data.inputs().len())
        .map(|k| input_columns(graph, k))
        .collect();
    for b in 0..data.batch_size() {
        let base: Vec<Vec<f64>> = data.inputs().iter().map(|x| x.row(b).to_vec()).collect();
        let eval = |inputs: &[Vec<f64>]| {
            let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
            naive_forward(graph, &refs)
        };
        let t0 = eval(&base)?;
        let f0 = selected(&t0, selection);
        for k in 0..base.len() {
            let len = base[k].len();
            for e in 0..len {
                let mut probe = base.clone();
                let mut step = h;
                let mut grads = None;
                let mut last = None;
                for _ in 0..=MAX_SHRINK {
                    let (tp, tm) = match &columns[k] {
                        Some((c, cols)) => {
                            let shifted = |s: f64| {
                                let mut z = t0.z[*c].clone();
                                for &(j, w) in &cols[e] {
                                    z[j] += s * w;
                                }
                                naive_resume(graph, &t0, *c, z)
                            };
                            (shifted(step), shifted(-step))
                        }
                        None => {
                            probe[k][e] = base[k][e] + step;
                            let tp = eval(&probe)?;
                            probe[k][e] = base[k][e] - step;
                            (tp, eval(&probe)?)
                        }
                    };
                    let (fp, fm) = (selected(&tp, selection), selected(&tm, selection));
                    let (same_p, same_m) = (tp.regime == t0.regime, tm.regime == t0.regime);
                    if same_p && same_m {
                        grads = Some(
                            fp.iter()
                                .zip(&fm)
                                .map(|(p, m)| (p - m) / (2.0 * step))
                                .collect::<Vec<_>>(),
                        );
                        break;
                    }
                    last = Some((fp, fm, same_p, same_m, step));
                    step /= 10.0;
                }
                let g = grads.unwrap_or_else(|| {
                    let (fp, fm, same_p, _, s) = last.expect("at least one probe ran");
                    if same_p {
                        fp.iter().zip(&f0).map(|(p, c)| (p - c) / s).collect()
                    } else {
                        // also covers neither side matching: x sits on the kink
                        f0.iter().zip(&fm).map(|(c, m)| (c - m) / s).collect()
                    }
                });
                for (s, v) in g.into_iter().enumerate() {
                    out[k][(b * len + e) * n_sel + s] = v;
                }
            }
        }
    }
    Ok(out
        .into_iter()
        .zip(data.inputs())
        .map(|(d, x)| {
            let mut shape = x.shape().to_vec();
            shape.push(n_sel);
            Tensor::new(shape, d, Precision::Double).expect("shape matches data")
        })
        .collect())
}
