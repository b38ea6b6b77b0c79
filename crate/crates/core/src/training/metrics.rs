use crate::error::Result;
use crate::model::{argmax, DualBranchModel, Layout};
use crate::numerics::{cross_entropy, Graph, Tensor};

/// Mean loss over layouts (no gradients).
pub fn mean_loss(model: &DualBranchModel, layouts: &[Layout]) -> Result<f64> {
    let mut total = 0f64;
    for l in layouts {
        total += model.loss_value(l)? as f64;
    }
    Ok(total / layouts.len().max(1) as f64)
}

/// `exp` of the mean next-token cross-entropy of text layouts through the
/// model's text path (bottom, text top layers, text head).
pub fn text_perplexity(model: &DualBranchModel, layouts: &[Layout]) -> Result<f64> {
    let mut nll = 0f64;
    let mut n = 0usize;
    for l in layouts {
        let logits = model.text_logits(l)?.cast::<f64>();
        let mut targets = vec![usize::MAX; l.len()];
        for &(pos, id) in &l.text_targets {
            targets[pos] = id;
        }
        nll += cross_entropy(&logits, &targets, usize::MAX)? * l.text_targets.len() as f64;
        n += l.text_targets.len();
    }
    Ok((nll / n.max(1) as f64).exp())
}

/// Text-branch logits for each probe layout.
pub fn probe_logits(model: &DualBranchModel, layouts: &[Layout]) -> Result<Vec<Tensor<f32>>> {
    layouts.iter().map(|l| model.text_logits(l)).collect()
}

/// Teacher-forced accuracy of the MTP sub-heads on generation layouts.
pub fn token_accuracy(model: &DualBranchModel, layouts: &[Layout]) -> Result<f64> {
    let cfg = &model.cfg;
    let (mut hit, mut total) = (0usize, 0usize);
    for l in layouts {
        let mut g = Graph::new();
        let net = model.net();
        let x = net.embed(&mut g, l)?;
        let h = net.bottom(&mut g, x)?;
        let top = net.speech_hidden(&mut g, h)?;
        let top = net.layer_norm(&mut g, "speech.ln_f", top)?;
        let pos: Vec<usize> = l.groups.iter().map(|gt| gt.pos).collect();
        let hg = g.gather_rows(top, &pos)?;
        for i in 0..cfg.group {
            let prev: Vec<usize> = l
                .groups
                .iter()
                .map(|gt| match i {
                    0 => cfg.speech_bos(),
                    _ => gt.tokens.get(i - 1).copied().unwrap_or(cfg.speech_pad()),
                })
                .collect();
            let logits = net.mtp_logits(&mut g, i, hg, &prev)?;
            let lv = g.value(logits);
            for (r, gt) in l.groups.iter().enumerate() {
                if let Some(&t) = gt.tokens.get(i) {
                    total += 1;
                    hit += usize::from(argmax(lv.row(r)) == t);
                }
            }
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}
