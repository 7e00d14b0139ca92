//! Alignment, decoupling into common/unique parts, cross-reconstruction, and
//! the classifier head with the joint objective.

use crate::error::{Error, Result};
use crate::model::{FusionVariant, ModelConfig};
use crate::nn::{Linear, Mlp2, ParamBuilder};
use crate::tensor::{ParamStore, Real, Tape, Var};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct AlignedFeatures {
    pub img: Var,
    pub tab: Var,
}

/// The four decoupled vectors, each `[B, M]`.
#[derive(Clone, Copy, Debug)]
pub struct DecoupledFeatures {
    pub img_common: Var,
    pub img_unique: Var,
    pub tab_common: Var,
    pub tab_unique: Var,
}

#[derive(Clone, Debug)]
pub struct Aligner {
    pub image: Linear,
    pub table: Linear,
}

impl Aligner {
    pub fn new(pb: &mut ParamBuilder<'_>, d_img: usize, d_tab: usize, d_f: usize) -> Result<Self> {
        pb.scope("align", |pb| {
            Ok(Aligner { image: Linear::new(pb, "image", d_img, d_f)?, table: Linear::new(pb, "table", d_tab, d_f)? })
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_img: Var,
        f_tab: Var,
    ) -> Result<AlignedFeatures> {
        Ok(AlignedFeatures {
            img: self.image.forward(tape, store, f_img)?,
            tab: self.table.forward(tape, store, f_tab)?,
        })
    }
}

/// Shared common encoder, per-modality unique encoders, and the two
/// cross-wired decoders.
#[derive(Clone, Debug)]
pub struct Decoupler {
    pub common: Mlp2,
    pub unique_img: Mlp2,
    pub unique_tab: Mlp2,
    pub decoder_img: Mlp2,
    pub decoder_tab: Mlp2,
}

impl Decoupler {
    pub fn new(pb: &mut ParamBuilder<'_>, d_f: usize, hidden: usize, m: usize) -> Result<Self> {
        pb.scope("decouple", |pb| {
            Ok(Decoupler {
                common: Mlp2::new(pb, "common", d_f, hidden, m)?,
                unique_img: Mlp2::new(pb, "unique_image", d_f, hidden, m)?,
                unique_tab: Mlp2::new(pb, "unique_table", d_f, hidden, m)?,
                decoder_img: Mlp2::new(pb, "decoder_image", 2 * m, hidden, d_f)?,
                decoder_tab: Mlp2::new(pb, "decoder_table", 2 * m, hidden, d_f)?,
            })
        })
    }

    pub fn decouple<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        a: AlignedFeatures,
    ) -> Result<DecoupledFeatures> {
        Ok(DecoupledFeatures {
            img_common: self.common.forward(tape, store, a.img)?,
            img_unique: self.unique_img.forward(tape, store, a.img)?,
            tab_common: self.common.forward(tape, store, a.tab)?,
            tab_unique: self.unique_tab.forward(tape, store, a.tab)?,
        })
    }

    /// Reconstructions `(D_i(f_t^c, f_i^u), D_t(f_i^c, f_t^u))`, each `[B, d_f]`.
    pub fn reconstruct<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        d: DecoupledFeatures,
    ) -> Result<(Var, Var)> {
        let img_in = tape.concat(&[d.tab_common, d.img_unique], 1)?;
        let tab_in = tape.concat(&[d.img_common, d.tab_unique], 1)?;
        Ok((self.decoder_img.forward(tape, store, img_in)?, self.decoder_tab.forward(tape, store, tab_in)?))
    }

    pub fn recon_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        d: DecoupledFeatures,
        a: AlignedFeatures,
    ) -> Result<Var> {
        let (rec_img, rec_tab) = self.reconstruct(tape, store, d)?;
        recon_loss_from(tape, a, rec_img, rec_tab)
    }
}

/// `(Σ|f_i − rec_img| + Σ|f_t − rec_tab|) / B`: summed over feature dims,
/// averaged over the batch.
pub fn recon_loss_from<T: Real>(tape: &mut Tape<T>, a: AlignedFeatures, rec_img: Var, rec_tab: Var) -> Result<Var> {
    let b = tape.shape(a.img).first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::op("recon_loss", "empty batch"));
    }
    let li = tape.l1_distance(a.img, rec_img)?;
    let lt = tape.l1_distance(a.tab, rec_tab)?;
    let total = tape.add(li, lt)?;
    Ok(tape.scale(total, T::of(1.0 / b as f64)))
}

/// Three linear layers with relu between them, ending in one logit.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub layers: [Linear; 3],
}

impl Classifier {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, inp: usize, hidden: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Classifier {
                layers: [
                    Linear::new(pb, "fc1", inp, hidden)?,
                    Linear::new(pb, "fc2", hidden, hidden)?,
                    Linear::new(pb, "fc3", hidden, 1)?,
                ],
            })
        })
    }

    /// `x [B, inp]` → probabilities `[B, 1]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < 2 {
                h = tape.relu(h);
            }
        }
        Ok(tape.sigmoid(h))
    }
}

/// `(L, L_ce)` with `L = L_ce + λ·L_recon`. Without a reconstruction term
/// `L` is `L_ce` itself.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    prob: Var,
    labels: &[T],
    recon: Option<Var>,
    lambda: f64,
) -> Result<(Var, Var)> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let ce = tape.binary_cross_entropy(prob, labels, T::of(BCE_EPS))?;
    let loss = match recon {
        Some(r) if lambda != 0.0 => {
            let r = tape.scale(r, T::of(lambda));
            tape.add(ce, r)?
        }
        _ => ce,
    };
    Ok((loss, ce))
}

#[derive(Clone, Debug, Default)]
pub struct FusionOutput {
    pub aligned: Option<AlignedFeatures>,
    pub decoupled: Option<DecoupledFeatures>,
    pub recon: Option<Var>,
    pub prob: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct FusionHead {
    pub aligner: Aligner,
    pub decoupler: Option<Decoupler>,
    pub classifier: Classifier,
}

impl FusionHead {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let aligner = Aligner::new(pb, cfg.d_img, cfg.d_tab, cfg.d_f)?;
        let (decoupler, inp) = match cfg.fusion {
            FusionVariant::Decoupling => {
                (Some(Decoupler::new(pb, cfg.d_f, cfg.fusion_hidden, cfg.feature_dim)?), 4 * cfg.feature_dim)
            }
            FusionVariant::Add => (None, 2 * cfg.d_f),
        };
        Ok(FusionHead {
            aligner,
            decoupler,
            classifier: Classifier::new(pb, "classifier", inp, cfg.classifier_hidden)?,
        })
    }

    /// Raw extractor features → probabilities `[B, 1]` and, with decoupling,
    /// the decoupled features and reconstruction loss.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_img: Var,
        f_tab: Var,
    ) -> Result<FusionOutput> {
        let aligned = self.aligner.forward(tape, store, f_img, f_tab)?;
        let mut out = FusionOutput { aligned: Some(aligned), ..Default::default() };
        let input = match &self.decoupler {
            Some(dec) => {
                let d = dec.decouple(tape, store, aligned)?;
                out.recon = Some(dec.recon_loss(tape, store, d, aligned)?);
                out.decoupled = Some(d);
                tape.concat(&[d.img_common, d.img_unique, d.tab_common, d.tab_unique], 1)?
            }
            None => tape.concat(&[aligned.img, aligned.tab], 1)?,
        };
        out.prob = Some(self.classifier.forward(tape, store, input)?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn decoupler(seed: u64) -> (Decoupler, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let d = Decoupler::new(&mut ParamBuilder::new(&mut store, &mut rng), 6, 10, 5).unwrap();
        (d, store)
    }

    #[test]
    fn equal_inputs_share_common_features() {
        let (dec, store) = decoupler(0);
        let mut rng = Rng::new(1);
        let x = rand_tensor(&mut rng, &[3, 6]);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x);
        let d = dec.decouple(&mut tape, &store, AlignedFeatures { img: a, tab: b }).unwrap();
        assert_eq!(tape.value(d.img_common), tape.value(d.tab_common));
        assert_ne!(tape.value(d.img_unique), tape.value(d.tab_unique));
        assert_eq!(tape.shape(d.tab_unique), &[3, 5]);
    }

    #[test]
    fn one_common_encoder_in_store() {
        let (_, store) = decoupler(0);
        let common = store.ids().filter(|&id| store.name(id).starts_with("decouple.common.")).count();
        assert_eq!(common, 4);
        assert!(store.find("decouple.common_image.fc1.weight").is_none());
    }

    #[test]
    fn recon_loss_arithmetic() {
        let mut rng = Rng::new(2);
        let f_i = rand_tensor(&mut rng, &[4, 6]);
        let f_t = rand_tensor(&mut rng, &[4, 6]);
        let mut tape = Tape::new();
        let a = AlignedFeatures { img: tape.constant(f_i.clone()), tab: tape.constant(f_t.clone()) };
        let exact = recon_loss_from(&mut tape, a, a.img, a.tab).unwrap();
        assert_eq!(tape.value(exact).item(), 0.0);

        let shifted: Vec<f64> = f_i.data().iter().map(|v| v + 1.0).collect();
        let r = tape.constant(Tensor::new(&[4, 6], shifted).unwrap());
        let l = recon_loss_from(&mut tape, a, r, a.tab).unwrap();
        assert!((tape.value(l).item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn empty_lambda_and_labels() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[4, 1], 0.5));
        let (l, ce) = total_loss(&mut tape, p, &[1.0, 0.0, 0.0, 1.0], None, 1.0).unwrap();
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l, ce);
        assert!(total_loss(&mut tape, p, &[1.0, 0.0, 2.0, 1.0], None, 1.0).is_err());
        assert!(total_loss(&mut tape, p, &[1.0, 0.0, 0.0, 1.0], None, f64::NAN).is_err());
    }

    #[test]
    fn zero_classifier_gives_half() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let c = Classifier::new(&mut ParamBuilder::new(&mut store, &mut rng), "c", 8, 4).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[3, 8]));
        let p = c.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.5));
    }
}
