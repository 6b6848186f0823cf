//! Attention statistics used to find the layer whose image-to-text
//! attention grounds the prompt best.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionTrace;

/// Attention mass shares of one layer, averaged over heads and query rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerShares {
    pub i2t: f64,
    pub i2i: f64,
    pub t2i: f64,
    pub t2t: f64,
    /// Text share of a uniform row, `l / (hw + l)`.
    pub uniform_text: f64,
    pub uniform_image: f64,
    /// `(i2t, t2i)` per head.
    pub per_head: Vec<(f64, f64)>,
}

fn mean_row_mass(block: ArrayView2<f64>) -> f64 {
    if block.nrows() == 0 {
        return 0.0;
    }
    block.sum() / block.nrows() as f64
}

pub fn attention_mass_ratios(trace: &AttentionTrace) -> Result<Vec<LayerShares>> {
    if trace.layers.is_empty() || trace.num_heads() == 0 {
        return Err(Error::Input("attention trace is empty".into()));
    }
    let hw = trace.hw();
    let l = trace.text_len;
    let n = (hw + l) as f64;
    Ok(trace
        .layers
        .iter()
        .map(|rec| {
            let mut out = LayerShares {
                uniform_text: l as f64 / n,
                uniform_image: hw as f64 / n,
                ..Default::default()
            };
            for a in &rec.heads {
                let i2t = mean_row_mass(a.slice(s![..hw, hw..]));
                let i2i = mean_row_mass(a.slice(s![..hw, ..hw]));
                let t2i = mean_row_mass(a.slice(s![hw.., ..hw]));
                let t2t = mean_row_mass(a.slice(s![hw.., hw..]));
                out.i2t += i2t;
                out.i2i += i2i;
                out.t2i += t2i;
                out.t2t += t2t;
                out.per_head.push((i2t, t2i));
            }
            let h = rec.heads.len() as f64;
            out.i2t /= h;
            out.i2i /= h;
            out.t2i /= h;
            out.t2t /= h;
            out
        })
        .collect())
}

/// Mean L2 norm of value rows per token group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValueNorms {
    pub image: f64,
    pub text: f64,
    /// Text tokens that are not `<pad>`.
    pub prompt: f64,
}

fn mean_norm<'a>(rows: impl Iterator<Item = ndarray::ArrayView1<'a, f64>>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in rows {
        sum += r.dot(&r).sqrt();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn value_norms(trace: &AttentionTrace, pad_mask: &[bool]) -> Result<Vec<ValueNorms>> {
    let hw = trace.hw();
    if pad_mask.len() != trace.text_len {
        return Err(Error::Input(format!(
            "pad mask has {} entries for {} tokens",
            pad_mask.len(),
            trace.text_len
        )));
    }
    trace
        .layers
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let v = rec
                .values
                .as_ref()
                .ok_or_else(|| Error::Input(format!("layer {i} has no captured values")))?;
            let rows = v.rows();
            Ok(ValueNorms {
                image: mean_norm(rows.into_iter().take(hw)),
                text: mean_norm(v.rows().into_iter().skip(hw)),
                prompt: mean_norm(
                    v.rows()
                        .into_iter()
                        .skip(hw)
                        .zip(pad_mask)
                        .filter(|(_, &p)| !p)
                        .map(|(r, _)| r),
                ),
            })
        })
        .collect()
}

/// Principal component projection of `features` (`n × d`) onto `k`
/// components, with explained-variance ratios. Each component's sign makes
/// its largest-magnitude coordinate positive.
pub fn pca_features(features: &Array2<f64>, k: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let (n, d) = features.dim();
    if k == 0 || k >= n || k > d {
        return Err(Error::Input(format!(
            "cannot take {k} components of {n} points in {d} dimensions"
        )));
    }
    let mean = features.mean_axis(ndarray::Axis(0)).expect("n > 0");
    let centered = features - &mean;
    let x = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut proj = Array2::zeros((n, k));
    let mut ratios = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let mut vec = eig.eigenvectors.column(idx).clone_owned();
        let lead = vec
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            vec = -vec;
        }
        let p = &x * &vec;
        for i in 0..n {
            proj[[i, c]] = p[i];
        }
        ratios.push(if total > 0.0 {
            (eig.eigenvalues[idx].max(0.0) / total).min(1.0)
        } else {
            0.0
        });
    }
    Ok((proj, ratios))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRank {
    pub layer: usize,
    pub miou: f64,
    pub prompt_value_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRanking {
    pub expert: usize,
    /// Best first.
    pub ranking: Vec<LayerRank>,
}

/// Orders layers by validation mIoU, then by non-pad text value norm, then
/// by lower index.
pub fn rank_layers(miou: &[f64], prompt_value_norms: &[f64]) -> Result<LayerRanking> {
    if miou.is_empty() || miou.len() != prompt_value_norms.len() {
        return Err(Error::Input(format!(
            "{} mIoU values for {} value norms",
            miou.len(),
            prompt_value_norms.len()
        )));
    }
    let mut ranking: Vec<LayerRank> = miou
        .iter()
        .zip(prompt_value_norms)
        .enumerate()
        .map(|(layer, (&miou, &prompt_value_norm))| LayerRank {
            layer,
            miou,
            prompt_value_norm,
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.miou
            .total_cmp(&a.miou)
            .then(b.prompt_value_norm.total_cmp(&a.prompt_value_norm))
            .then(a.layer.cmp(&b.layer))
    });
    Ok(LayerRanking {
        expert: ranking[0].layer,
        ranking,
    })
}

/// Per-layer mean and standard deviation over many traces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub i2t: (f64, f64),
    pub i2i: (f64, f64),
    pub t2i: (f64, f64),
    pub t2t: (f64, f64),
    pub uniform_text: f64,
    pub value_image: (f64, f64),
    pub value_text: (f64, f64),
    pub value_prompt: (f64, f64),
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn summarize(per_trace: &[(Vec<LayerShares>, Vec<ValueNorms>)]) -> Result<Vec<LayerSummary>> {
    let Some((first, _)) = per_trace.first() else {
        return Err(Error::Input("no traces to summarize".into()));
    };
    let layers = first.len();
    let col = |f: &dyn Fn(&LayerShares, &ValueNorms) -> f64, l: usize| {
        mean_std(&per_trace.iter().map(|(s, v)| f(&s[l], &v[l])).collect::<Vec<_>>())
    };
    Ok((0..layers)
        .map(|l| LayerSummary {
            layer: l,
            i2t: col(&|s, _| s.i2t, l),
            i2i: col(&|s, _| s.i2i, l),
            t2i: col(&|s, _| s.t2i, l),
            t2t: col(&|s, _| s.t2t, l),
            uniform_text: first[l].uniform_text,
            value_image: col(&|_, v| v.image, l),
            value_text: col(&|_, v| v.text, l),
            value_prompt: col(&|_, v| v.prompt, l),
        })
        .collect())
}

pub fn summary_csv(timestep: f64, rows: &[LayerSummary], out: &mut String) {
    if out.is_empty() {
        out.push_str(
            "timestep,layer,i2t_mean,i2t_std,i2i_mean,i2i_std,t2i_mean,t2i_std,t2t_mean,t2t_std,uniform_text,\
             value_image_mean,value_image_std,value_text_mean,value_text_std,value_prompt_mean,value_prompt_std\n",
        );
    }
    for r in rows {
        let cells = [r.i2t, r.i2i, r.t2i, r.t2t];
        let mut line = format!("{timestep},{}", r.layer);
        for (m, s) in cells {
            line.push_str(&format!(",{m:.6},{s:.6}"));
        }
        line.push_str(&format!(",{:.6}", r.uniform_text));
        for (m, s) in [r.value_image, r.value_text, r.value_prompt] {
            line.push_str(&format!(",{m:.6},{s:.6}"));
        }
        out.push_str(&line);
        out.push('\n');
    }
}
