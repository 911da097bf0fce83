//! Lossless image compression with a flow model and the rANS coder.
//!
//! Each image is coded independently through the model (batch of one), so
//! the encoder and decoder evaluate the priors with identical arithmetic.
//! Within an image latents are decoded top level first,
//! `z^(L), z^(L-1) | y^(L-1), ..., z^(1) | y^(1)`, and images follow each
//! other in batch order. Every table carries one extra escape symbol with
//! the minimum frequency; escaped latents are stored raw.

use super::stream::CompressedStream;
use super::{quantize_cdf, QuantizedCdf, RansDecoder, RansEncoder, DEFAULT_PRECISION};
use crate::dists::{DiscretizedLogistic, LatticeSpec, MixtureDL};
use crate::error::{Error, Result};
use crate::flows::{model_hash, FlowModel, Mode, PriorParams};
use crate::grid::{GridTensor, Shape4};

/// Sizes of a compressed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionReport {
    pub images: usize,
    pub dims: usize,
    pub payload_bytes: usize,
    pub escapes: usize,
    pub file_bytes: usize,
    /// Payload and escape bits per dimension.
    pub coded_bpd: f64,
    /// Whole file, header included, per dimension.
    pub file_bpd: f64,
}

impl CompressionReport {
    pub fn new(stream: &CompressedStream) -> Result<Self> {
        let file_bytes = stream.to_bytes()?.len();
        let images = stream.shape[0];
        let dims = stream.shape[1] * stream.shape[2] * stream.shape[3];
        let total = (images * dims).max(1) as f64;
        Ok(CompressionReport {
            images,
            dims,
            payload_bytes: stream.payload.len(),
            escapes: stream.escapes.len(),
            file_bytes,
            coded_bpd: stream.coded_bits() as f64 / total,
            file_bpd: 8.0 * file_bytes as f64 / total,
        })
    }
}

/// Builds the coding table for latent element `i` of a block.
struct Tables<'a> {
    prior: &'a PriorParams,
    spec: LatticeSpec,
    /// Mixture tables are shared across images, keyed by position.
    cache: Vec<Option<QuantizedCdf>>,
}

impl<'a> Tables<'a> {
    fn new(prior: &'a PriorParams, spec: LatticeSpec) -> Self {
        let cache = match prior {
            PriorParams::Mixture { mu, components, .. } => vec![None; mu.len() / components],
            PriorParams::Logistic { .. } => Vec::new(),
        };
        Tables { prior, spec, cache }
    }

    fn with_escape(mut pmf: Vec<f64>) -> Result<QuantizedCdf> {
        pmf.push(0.0);
        quantize_cdf(&pmf, DEFAULT_PRECISION)
    }

    fn get(&mut self, i: usize) -> Result<QuantizedCdf> {
        match self.prior {
            PriorParams::Logistic { mu, log_s } => {
                Self::with_escape(DiscretizedLogistic::new(mu[i], log_s[i], self.spec).pmf_table()?)
            }
            PriorParams::Mixture {
                mu,
                log_s,
                logits,
                components,
            } => {
                let pos = i % self.cache.len();
                if self.cache[pos].is_none() {
                    let r = pos * components..(pos + 1) * components;
                    let m = MixtureDL::new(
                        mu[r.clone()].to_vec(),
                        log_s[r.clone()].to_vec(),
                        logits[r].to_vec(),
                        self.spec,
                    )?;
                    self.cache[pos] = Some(Self::with_escape(m.pmf_table()?)?);
                }
                Ok(self.cache[pos].clone().expect("filled above"))
            }
        }
    }
}

fn alphabet_of(spec: &LatticeSpec) -> (i64, i64) {
    (
        (spec.lo / spec.bin).round() as i64,
        (spec.hi / spec.bin).round() as i64,
    )
}

fn collect_symbols(
    tables: &mut Tables,
    z: &GridTensor,
    lo: i64,
    hi: i64,
    coded: &mut Vec<(QuantizedCdf, usize)>,
    escapes: &mut Vec<i32>,
) -> Result<()> {
    for (i, &c) in z.codes().iter().enumerate() {
        let cdf = tables.get(i)?;
        let sym =
            if (lo..=hi).contains(&c) {
                (c - lo) as usize
            } else {
                escapes.push(i32::try_from(c).map_err(|_| {
                    Error::Domain(format!("latent {c} does not fit the escape width"))
                })?);
                cdf.len() - 1
            };
        coded.push((cdf, sym));
    }
    Ok(())
}

/// Compresses a batch of images. The model must be discrete.
pub fn compress(model: &FlowModel, x: &GridTensor) -> Result<CompressedStream> {
    if model.config().mode != Mode::Discrete {
        return Err(Error::Usage("only discrete models can compress".into()));
    }
    model.check_input(x)?;
    let spec = model.lattice();
    let (lo, hi) = alphabet_of(&spec);
    let levels = model.levels().len();
    let top = model.top_params();
    let mut top_tables = Tables::new(&top, spec);
    let mut enc = RansEncoder::new();
    let mut escapes_per_image = vec![Vec::new(); x.batch()];
    for b in (0..x.batch()).rev() {
        let blocks = model.encode_view(&x.batch_slice(b, b + 1)?)?;
        let mut coded: Vec<(QuantizedCdf, usize)> = Vec::new();
        let escapes = &mut escapes_per_image[b];
        for l in (0..levels).rev() {
            let block = &blocks[l];
            if l + 1 == levels {
                collect_symbols(&mut top_tables, &block.z, lo, hi, &mut coded, escapes)?;
            } else {
                let mut tables = Tables::new(&block.prior, spec);
                collect_symbols(&mut tables, &block.z, lo, hi, &mut coded, escapes)?;
            }
        }
        for (cdf, sym) in coded.iter().rev() {
            enc.encode(cdf, *sym)?;
        }
    }
    Ok(CompressedStream {
        model_hash: model_hash(model)?,
        shape: x.shape(),
        bits: x.bits(),
        alphabets: vec![(lo as i32, hi as i32); levels],
        payload: enc.finish(),
        escapes: escapes_per_image.concat(),
    })
}

/// Inverts [`compress`]; the stream must reference `model`.
pub fn decompress(model: &FlowModel, stream: &CompressedStream) -> Result<GridTensor> {
    if stream.model_hash != model_hash(model)? {
        return Err(Error::ModelMismatch(
            "stream was written with a different model".into(),
        ));
    }
    let cfg = model.config();
    let [n, h, w, c] = stream.shape;
    if [h, w, c] != [cfg.height, cfg.width, cfg.channels] || stream.bits != cfg.bits {
        return Err(Error::ModelMismatch(format!(
            "stream holds {h}x{w}x{c} {}-bit images, model expects {}x{}x{} {}-bit",
            stream.bits, cfg.height, cfg.width, cfg.channels, cfg.bits
        )));
    }
    let levels = model.levels().len();
    if stream.alphabets.len() != levels {
        return Err(Error::Format(format!(
            "{} alphabets for {levels} levels",
            stream.alphabets.len()
        )));
    }
    let specs: Vec<LatticeSpec> = stream
        .alphabets
        .iter()
        .map(|&(lo, hi)| LatticeSpec::from_codes(stream.bits, lo as i64, hi as i64))
        .collect();
    let top = model.top_params();
    let mut top_tables = Tables::new(&top, specs[levels - 1]);
    let mut dec = RansDecoder::new(&stream.payload);
    let mut escapes = stream.escapes.iter();
    let mut decode_block = |tables: &mut Tables, shape: Shape4, lo: i32| -> Result<GridTensor> {
        let count = shape.iter().product();
        let mut codes = Vec::with_capacity(count);
        for i in 0..count {
            let cdf = tables.get(i)?;
            let s = dec.decode(&cdf)?;
            codes.push(if s + 1 == cdf.len() {
                *escapes
                    .next()
                    .ok_or_else(|| Error::Corruption("escape section exhausted".into()))?
                    as i64
            } else {
                lo as i64 + s as i64
            });
        }
        GridTensor::new(shape, codes, stream.bits)
    };
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let last = levels - 1;
        let z = decode_block(
            &mut top_tables,
            model.latent_shape(last, 1),
            stream.alphabets[last].0,
        )?;
        let mut y = model.level_inverse(last, &z, None)?;
        for l in (0..last).rev() {
            let prior = model.conditional_params(l, &y)?;
            let mut tables = Tables::new(&prior, specs[l]);
            let z = decode_block(&mut tables, model.latent_shape(l, 1), stream.alphabets[l].0)?;
            y = model.level_inverse(l, &z, Some(&y))?;
        }
        images.push(y);
    }
    dec.finish()?;
    if escapes.next().is_some() {
        return Err(Error::Corruption("unused escape values".into()));
    }
    if images.is_empty() {
        return GridTensor::new(stream.shape, Vec::new(), stream.bits);
    }
    GridTensor::stack(&images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::ModelConfig;
    use crate::nn::{BackboneSpec, BlockVariant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(levels: usize) -> FlowModel {
        let backbone = BackboneSpec::DenseNet {
            variant: BlockVariant::Idfpp,
            depth: 1,
            channels: 8,
        };
        let cfg = ModelConfig {
            levels,
            backbone,
            prior_backbone: backbone,
            ..ModelConfig::tiny_idfpp()
        };
        let mut m = FlowModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..m.store().len() {
            let name = m.store().get(i).name.clone();
            for v in m.store_mut().get_mut(i).value.data_mut() {
                if name.ends_with("alpha") || name.ends_with("gamma") || name.ends_with("delta") {
                    *v = rng.gen_range(0.2..1.0);
                }
            }
        }
        m
    }

    fn images(n: usize, seed: u64) -> GridTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Smooth-ish images so the model has something to exploit.
        let codes = (0..n * 192)
            .map(|i| ((i % 24) as i64 * 9 + rng.gen_range(0..20)).min(255))
            .collect();
        GridTensor::new([n, 8, 8, 3], codes, 8).unwrap()
    }

    #[test]
    fn roundtrip_and_rate_matches_nll() {
        for levels in [1, 2] {
            let m = model(levels);
            let x = images(3, levels as u64);
            let s = compress(&m, &x).unwrap();
            let bytes = s.to_bytes().unwrap();
            let back = decompress(&m, &CompressedStream::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, x);
            let r = CompressionReport::new(&s).unwrap();
            let nll = m.nll_bpd(&x).unwrap();
            assert!(r.coded_bpd <= nll + 0.05, "{} vs {nll}", r.coded_bpd);
            assert!(r.coded_bpd >= nll - 0.05, "{} vs {nll}", r.coded_bpd);
        }
    }

    #[test]
    fn output_is_deterministic() {
        let m = model(2);
        let x = images(2, 5);
        assert_eq!(
            compress(&m, &x).unwrap().to_bytes().unwrap(),
            compress(&m, &x).unwrap().to_bytes().unwrap()
        );
    }

    #[test]
    fn escapes_roundtrip() {
        // Shrink the stored alphabet by hand so ordinary latents escape.
        let m = model(1);
        let x = images(1, 9);
        let mut s = compress(&m, &x).unwrap();
        assert!(s.escapes.is_empty());
        let spec = LatticeSpec::from_codes(8, 0, 40);
        let top = m.top_params();
        let mut tables = Tables::new(&top, spec);
        let z = m.model_forward(&x).unwrap().remove(0);
        let mut coded = Vec::new();
        let mut escapes = Vec::new();
        collect_symbols(&mut tables, &z, 0, 40, &mut coded, &mut escapes).unwrap();
        let mut enc = RansEncoder::new();
        for (cdf, sym) in coded.iter().rev() {
            enc.encode(cdf, *sym).unwrap();
        }
        s.payload = enc.finish();
        s.alphabets = vec![(0, 40)];
        s.escapes = escapes;
        assert!(!s.escapes.is_empty());
        assert_eq!(decompress(&m, &s).unwrap(), x);
    }

    #[test]
    fn wrong_model_is_refused() {
        let m = model(2);
        let x = images(1, 3);
        let s = compress(&m, &x).unwrap();
        let mut other = m.clone();
        other.store_mut().get_mut(0).value.data_mut()[0] += 1.0;
        assert!(matches!(
            decompress(&other, &s),
            Err(Error::ModelMismatch(_))
        ));
    }
}
