//! The full segmentation model: energy net, feature extractor, offset head
//! and extreme-point head, plus checkpoint I/O.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::amem::{sample_features, AmemConfig, AmemHead, EvolutionState};
use crate::dcim::Dcim;
use crate::diff::{checkpoint, Graph, NodeId, ParamSet, Tensor};
use crate::energymap::{image_tensor, EnergyMap, EnergyNet};
use crate::error::{Error, Result};
use crate::evolution::{
    aligned_ground_truth, box_extreme_loss, contour_loss, evolve, extreme_points, BBox, ExtremeHead, Instance, PipelineConfig,
};
use crate::geometry::{Contour, Point};
use crate::pnm::Gray;

const META: &str = "meta.config";

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnakeModel {
    pub config: PipelineConfig,
    pub energy: EnergyNet,
    /// `None` when the energy/DCIM path is ablated; only the image channel
    /// remains.
    pub dcim: Option<Dcim>,
    pub head: AmemHead,
    pub extreme: ExtremeHead,
}

/// Graph nodes of the snake-side parameters for one forward pass.
pub struct Bindings {
    pub dcim: Vec<NodeId>,
    pub head: Vec<NodeId>,
    pub extreme: Vec<NodeId>,
}

/// Graph nodes produced while evolving one instance.
pub struct Trace {
    pub instance: Instance,
    /// Undetached `N×2` prediction of every iteration.
    pub predictions: Vec<NodeId>,
    /// Point features at the initial contour.
    pub initial_features: NodeId,
}

impl SnakeModel {
    /// Each component draws its weights from its own stream so toggling one
    /// ablation flag leaves the others' initialisation unchanged.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let energy = EnergyNet::new(&mut rng_for(config.seed, 1));
        let dcim = config
            .use_demp_dcim
            .then(|| Dcim::new(config.features, &mut rng_for(config.seed, 2)));
        let f = 1 + if config.use_demp_dcim { config.features } else { 0 };
        let head = AmemHead::new(
            AmemConfig {
                features: f,
                width: config.width,
                heads: config.heads,
                use_attention: config.use_amem,
                ..AmemConfig::default()
            },
            &mut rng_for(config.seed, 3),
        )?;
        let extreme = ExtremeHead::new(f + 2, &mut rng_for(config.seed, 4));
        Ok(Self {
            config,
            energy,
            dcim,
            head,
            extreme,
        })
    }

    /// Channels of the maps the contour samples from.
    pub fn feature_channels(&self) -> usize {
        1 + self.dcim.as_ref().map_or(0, Dcim::features)
    }

    pub fn predict_energy(&self, image: &Gray) -> Result<EnergyMap> {
        self.energy.predict(&image_tensor(image))
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bindings {
        Bindings {
            dcim: self.dcim.as_ref().map_or_else(Vec::new, |d| d.params.bind(g, trainable).ids().to_vec()),
            head: self.head.params.bind(g, trainable).ids().to_vec(),
            extreme: self.extreme.params.bind(g, trainable).ids().to_vec(),
        }
    }

    /// Parameters optimised in the contour phase, in binding order.
    pub fn snake_params_mut(&mut self) -> Vec<&mut ParamSet> {
        let mut v = Vec::with_capacity(3);
        if let Some(d) = &mut self.dcim {
            v.push(&mut d.params);
        }
        v.push(&mut self.head.params);
        v.push(&mut self.extreme.params);
        v
    }

    pub fn snake_params(&self) -> Vec<&ParamSet> {
        let mut v = Vec::with_capacity(3);
        if let Some(d) = &self.dcim {
            v.push(&d.params);
        }
        v.push(&self.head.params);
        v.push(&self.extreme.params);
        v
    }

    /// Maps for one image: DCIM over the energy map in slope units stacked
    /// on top of the image channel, or the image alone.
    pub fn feature_maps(&self, g: &mut Graph, b: &Bindings, image: &Gray, energy: &EnergyMap) -> Result<NodeId> {
        let img = g.constant(image_tensor(image));
        match &self.dcim {
            Some(d) => {
                let e = g.constant(energy.slope_tensor());
                let f = d.forward(g, &b.dcim, e)?;
                g.concat0(&[f, img])
            }
            None => Ok(img),
        }
    }

    /// Evolves one box over `maps`, recording the graph of every iteration.
    /// Contours are detached between iterations.
    pub fn trace(&self, g: &mut Graph, b: &Bindings, maps: NodeId, bbox: &BBox) -> Result<Trace> {
        let (_, h, w) = g.value(maps).dims3()?;
        let frame = bbox.frame();
        let mut predictions = Vec::with_capacity(self.config.iterations);
        let mut initial_features = None;
        let instance = evolve(bbox, self.config.points, self.config.iterations, w, h, |t, cur, prev| {
            let pts = g.constant(cur.to_tensor());
            let fc = sample_features(g, maps, pts, frame)?;
            let (fh, disp) = if t == 1 {
                initial_features = Some(fc);
                (fc, Tensor::zeros(&[cur.len(), 2]))
            } else {
                let pp = g.constant(prev.to_tensor());
                let d: Vec<f64> = cur
                    .points()
                    .iter()
                    .zip(prev.points())
                    .flat_map(|(&c, &p)| [c.x - p.x, c.y - p.y])
                    .collect();
                (sample_features(g, maps, pp, frame)?, Tensor::new(&[cur.len(), 2], d)?)
            };
            let displacement = g.constant(disp);
            let state = EvolutionState {
                iteration: t,
                current: fc,
                history: fh,
                displacement,
                frame,
            };
            let off = self.head.predict_offsets(g, &b.head, &state)?;
            predictions.push(g.add(pts, off)?);
            Ok(g.data(off).chunks(2).map(|p| Point::new(p[0], p[1])).collect())
        })?;
        Ok(Trace {
            instance,
            predictions,
            initial_features: initial_features.expect("at least one iteration"),
        })
    }

    /// `Σ_t L_iter(t) + L_ex` for one instance against its ground-truth
    /// polygon. The ground truth is paired with the initial contour once.
    pub fn instance_loss(&self, g: &mut Graph, b: &Bindings, maps: NodeId, bbox: &BBox, gt: &Contour) -> Result<(NodeId, Instance)> {
        let tr = self.trace(g, b, maps, bbox)?;
        let target = aligned_ground_truth(&tr.instance.initial, gt)?;
        let ex = self.extreme.forward(g, &b.extreme, tr.initial_features, bbox.frame())?;
        let mut total = box_extreme_loss(g, ex, &extreme_points(gt))?;
        for &p in &tr.predictions {
            let l = contour_loss(g, p, &target)?;
            total = g.add(total, l)?;
        }
        Ok((total, tr.instance))
    }

    /// Inference over given boxes with a precomputed energy map.
    pub fn segment_with_energy(&self, image: &Gray, energy: &EnergyMap, boxes: &[BBox]) -> Result<Vec<Instance>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let maps = self.feature_maps(&mut g, &b, image, energy)?;
        boxes.iter().map(|bx| Ok(self.trace(&mut g, &b, maps, bx)?.instance)).collect()
    }

    pub fn segment(&self, image: &Gray, boxes: &[BBox]) -> Result<Vec<Instance>> {
        let e = self.predict_energy(image)?;
        self.segment_with_energy(image, &e, boxes)
    }

    /// Energy-net tensors only, for the pretraining checkpoint.
    pub fn energy_tensors(&self) -> Vec<(String, Tensor)> {
        self.energy.params.named("energy.")
    }

    pub fn to_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let c = &self.config;
        let meta = vec![
            c.points as f64,
            c.iterations as f64,
            c.features as f64,
            c.heads as f64,
            c.width as f64,
            (c.seed >> 32) as f64,
            (c.seed & 0xffff_ffff) as f64,
            c.use_demp_dcim as u8 as f64,
            c.use_amem as u8 as f64,
        ];
        let mut v = vec![(META.to_string(), Tensor::new(&[meta.len()], meta)?)];
        v.extend(self.energy_tensors());
        if let Some(d) = &self.dcim {
            v.extend(d.params.named("dcim."));
        }
        v.extend(self.head.params.named("amem."));
        v.extend(self.extreme.params.named("extreme."));
        Ok(v)
    }

    pub fn from_tensors(t: &[(String, Tensor)]) -> Result<Self> {
        let (_, meta) = t
            .iter()
            .find(|(n, _)| n == META)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {META}")))?;
        let m = meta.data();
        if m.len() != 9 || m.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(Error::Format(format!("malformed {META}")));
        }
        let config = PipelineConfig {
            points: m[0] as usize,
            iterations: m[1] as usize,
            features: m[2] as usize,
            heads: m[3] as usize,
            width: m[4] as usize,
            seed: ((m[5] as u64) << 32) | m[6] as u64,
            use_demp_dcim: m[7] != 0.0,
            use_amem: m[8] != 0.0,
        };
        let mut model = Self::new(config)?;
        model.energy.params.load_named("energy.", t)?;
        if let Some(d) = &mut model.dcim {
            d.params.load_named("dcim.", t)?;
        }
        model.head.params.load_named("amem.", t)?;
        model.extreme.params.load_named("extreme.", t)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.to_tensors()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use crate::evolution::initial_contour;
    use crate::geometry::resample;

    fn small(dcim: bool, amem: bool) -> PipelineConfig {
        PipelineConfig {
            points: 16,
            iterations: 2,
            features: 4,
            heads: 2,
            width: 8,
            seed: 5,
            use_demp_dcim: dcim,
            use_amem: amem,
        }
    }

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> Gray {
        Gray {
            width: w,
            height: h,
            pixels: (0..w * h).map(|i| f(i % w, i / w)).collect(),
        }
    }

    #[test]
    fn four_distinct_architectures() {
        let counts: Vec<usize> = [(true, true), (true, false), (false, true), (false, false)]
            .iter()
            .map(|&(d, a)| {
                let m = SnakeModel::new(small(d, a)).unwrap();
                m.snake_params().iter().map(|p| p.count()).sum::<usize>() + usize::from(a) * 1_000_000
            })
            .collect();
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(counts[i], counts[j]);
            }
        }
        // head weights are identical whether or not the DCIM path is present
        let a = SnakeModel::new(small(true, true)).unwrap();
        let b = SnakeModel::new(small(true, false)).unwrap();
        assert_eq!(a.head.params, b.head.params);
        assert_eq!(a.energy, SnakeModel::new(small(false, false)).unwrap().energy);
    }

    #[test]
    fn checkpoint_round_trip() {
        for (d, a) in [(true, true), (false, false)] {
            let mut cfg = small(d, a);
            cfg.seed = u64::MAX - 3;
            let m = SnakeModel::new(cfg).unwrap();
            let back = SnakeModel::from_tensors(&m.to_tensors().unwrap()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.encode().unwrap(), m.encode().unwrap());
        }
        let m = SnakeModel::new(small(true, true)).unwrap();
        let mut t = m.to_tensors().unwrap();
        t.retain(|(n, _)| !n.starts_with("dcim."));
        assert!(matches!(SnakeModel::from_tensors(&t), Err(Error::Format(_))));
    }

    #[test]
    fn segment_produces_configured_shapes() {
        let m = SnakeModel::new(small(true, true)).unwrap();
        let img = gray(32, 32, |x, y| if (8..24).contains(&x) && (8..24).contains(&y) { 200 } else { 40 });
        let b = BBox::new(0, 6.0, 7.0, 26.0, 25.0).unwrap();
        let out = m.segment(&img, &[b, b]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0].contours.len(), 2);
        assert!(out[0].contours.iter().all(|c| c.len() == 16));
        assert_eq!(out[0].initial, initial_contour(&b, 16).unwrap());
    }

    #[test]
    fn translation_equivariant_at_init() {
        let mut m = SnakeModel::new(PipelineConfig {
            points: 32,
            iterations: 3,
            ..small(true, true)
        })
        .unwrap();
        // keep the contour well inside the canvas so clamping never triggers
        for t in m.head.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 0.3);
        }
        let field = |x: f64, y: f64| ((x * 0.37).sin() + (y * 0.21).cos() * (x * 0.05).sin()).abs() * 100.0;
        let (dx, dy) = (5usize, 3usize);
        let energy = |sx: usize, sy: usize| {
            let e: Vec<f64> = (0..96 * 96)
                .map(|i| {
                    let (x, y) = ((i % 96) as f64 - sx as f64, (i / 96) as f64 - sy as f64);
                    field(x, y)
                })
                .collect();
            EnergyMap::new(96, 96, e).unwrap()
        };
        let blank = gray(96, 96, |_, _| 0);
        let b0 = BBox::new(0, 30.0, 28.0, 58.0, 61.0).unwrap();
        let b1 = BBox::new(0, b0.x_min + dx as f64, b0.y_min + dy as f64, b0.x_max + dx as f64, b0.y_max + dy as f64).unwrap();
        let i0 = m.segment_with_energy(&blank, &energy(0, 0), &[b0]).unwrap();
        let i1 = m.segment_with_energy(&blank, &energy(dx, dy), &[b1]).unwrap();
        let mut moved = false;
        for (c0, c1) in i0[0].contours.iter().zip(&i1[0].contours) {
            for (p, q) in c0.points().iter().zip(c1.points()) {
                assert!((q.x - p.x - dx as f64).abs() < 1e-9 && (q.y - p.y - dy as f64).abs() < 1e-9);
                assert!(p.x > 1.0 && p.x < 90.0 && p.y > 1.0 && p.y < 90.0);
            }
            moved |= *c0 != i0[0].initial;
        }
        assert!(moved);
    }

    #[test]
    fn instance_loss_gradients() {
        // one iteration: later iterations start from detached contours, which
        // finite differences would see through
        let m = SnakeModel::new(PipelineConfig {
            iterations: 1,
            ..small(true, true)
        })
        .unwrap();
        let img = gray(24, 24, |x, y| ((x * 7 + y * 3) % 50) as u8 * 4);
        let energy = EnergyMap::new(24, 24, (0..576).map(|i| ((i * 37) % 255) as f64).collect()).unwrap();
        let bbox = BBox::new(1, 5.0, 6.0, 18.0, 17.0).unwrap();
        let gt = resample(
            &Contour::new(vec![Point::new(7.0, 8.0), Point::new(16.5, 7.5), Point::new(15.0, 15.0), Point::new(8.0, 16.0)]).unwrap(),
            40,
        )
        .unwrap();
        let sets = m.snake_params();
        let (n0, n1) = (sets[0].len(), sets[1].len());
        let all: Vec<Tensor> = sets.iter().flat_map(|s| s.tensors().iter().cloned()).collect();
        let err = grad_check(
            |g, w| {
                let b = Bindings {
                    dcim: w[..n0].to_vec(),
                    head: w[n0..n0 + n1].to_vec(),
                    extreme: w[n0 + n1..].to_vec(),
                };
                let maps = m.feature_maps(g, &b, &img, &energy)?;
                Ok(m.instance_loss(g, &b, maps, &bbox, &gt)?.0)
            },
            &all,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
