//! Weight-free LPIPS-shaped distance on backbone taps.

use gbuf_autodiff::{Graph, Var};

use crate::backbone::PerceptualBackbone;
use crate::{shape_err, Result};

const NORM_EPS: f64 = 1e-10;

/// Mean squared difference of channel-normalized features, averaged over taps.
pub fn distance_from_taps(g: &mut Graph, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err(format!("{} taps vs {}", a.len(), b.len())));
    }
    let mut total = None;
    for (&fa, &fb) in a.iter().zip(b) {
        let na = g.channel_normalize(fa, NORM_EPS)?;
        let nb = g.channel_normalize(fb, NORM_EPS)?;
        let d = g.sub(na, nb)?;
        let d = g.square(d);
        let m = g.mean(d);
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    Ok(g.scale(total.expect("nonempty"), 1.0 / a.len() as f64))
}

pub fn perceptual_distance(g: &mut Graph, backbone: &dyn PerceptualBackbone, a: Var, b: Var) -> Result<Var> {
    let ta = backbone.forward(g, a)?;
    let tb = backbone.forward(g, b)?;
    distance_from_taps(g, &ta, &tb)
}
