//! End-to-end gradients (dense parameters and individual embedding rows,
//! through aggregation and fan-out) against central finite differences in
//! f64.

use std::collections::BTreeMap;

use hybrid_ps::dense::{bce_loss, DenseModel};
use hybrid_ps::embedding_worker::{aggregate, fan_out, Aggregation};
use hybrid_ps::ids::IdFeatures;
use hybrid_ps::nn_worker::{build_input, train_step};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    model: DenseModel<f64>,
    table: BTreeMap<u64, Vec<f64>>,
    samples: Vec<IdFeatures>,
    non_id: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
    agg: Aggregation,
}

impl Instance {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = rng.gen_range(1..=3);
        let dim = rng.gen_range(1..=4);
        let non_id_dim = rng.gen_range(0..=3);
        let batch = rng.gen_range(1..=6);
        let vocab = rng.gen_range(2..=8u64);
        let agg = if rng.gen_bool(0.8) { Aggregation::Mean } else { Aggregation::Sum };
        let mut dims = vec![groups * dim + non_id_dim];
        for _ in 0..rng.gen_range(1..=2) {
            dims.push(rng.gen_range(2..=6));
        }
        dims.push(1);
        let mut model = DenseModel::<f32>::new(&dims, seed).unwrap().cast::<f64>();
        // Nonzero biases keep an all-zero input off the ReLU kink.
        let jittered: Vec<f64> = model.flatten().iter().map(|w| w + rng.gen_range(-0.1..0.1)).collect();
        model.load_flat(&jittered).unwrap();
        let samples: Vec<IdFeatures> = (0..batch)
            .map(|_| {
                IdFeatures::new(
                    (0..groups)
                        .map(|_| (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(0..vocab)).collect())
                        .collect(),
                )
            })
            .collect();
        let mut table = BTreeMap::new();
        for s in &samples {
            for &id in s.groups.iter().flatten() {
                table
                    .entry(id)
                    .or_insert_with(|| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
        }
        Instance {
            model,
            table,
            non_id: (0..batch * non_id_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            labels: (0..batch).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
            samples,
            dim,
            agg,
        }
    }

    fn embeddings(&self, table: &BTreeMap<u64, Vec<f64>>) -> Vec<f64> {
        let width = self.samples[0].groups.len() * self.dim;
        let mut out = vec![0.0; self.samples.len() * width];
        for (i, s) in self.samples.iter().enumerate() {
            aggregate(s, self.dim, self.agg, |id| table[&id].as_slice(), &mut out[i * width..(i + 1) * width]);
        }
        out
    }

    fn loss(&self, model: &DenseModel<f64>, table: &BTreeMap<u64, Vec<f64>>) -> f64 {
        let input = build_input(&self.embeddings(table), &self.non_id, self.labels.len()).unwrap();
        let (p, _) = model.forward(&input).unwrap();
        bce_loss(&p, &self.labels).unwrap()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks `instances` random instances; returns the worst relative error.
/// Relative error uses a floor of 1e-6 on the magnitude.
pub fn check_instances(instances: u64, tolerance: f64) -> Result<f64, String> {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let inst = Instance::random(seed);
        let emb = inst.embeddings(&inst.table);
        let (_, bundle) = train_step(&inst.model, &emb, &inst.non_id, &inst.labels).unwrap();

        // Dense parameters.
        let flat = inst.model.flatten();
        let analytic = bundle.dense.flatten();
        for j in 0..flat.len() {
            let mut m = inst.model.clone();
            let mut p = flat.clone();
            p[j] = flat[j] + h;
            m.load_flat(&p).unwrap();
            let up = inst.loss(&m, &inst.table);
            p[j] = flat[j] - h;
            m.load_flat(&p).unwrap();
            let down = inst.loss(&m, &inst.table);
            let e = rel_err(analytic[j], (up - down) / (2.0 * h));
            if e > tolerance {
                return Err(format!("seed {seed} dense param {j}: analytic {} vs numeric {}", analytic[j], (up - down) / (2.0 * h)));
            }
            worst = worst.max(e);
        }

        // Embedding rows: per-sample input gradients fanned out to ids and
        // summed over the batch.
        let width = inst.samples[0].groups.len() * inst.dim;
        let mut emb_grad: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for (i, s) in inst.samples.iter().enumerate() {
            let row = &bundle.input.row(i)[..width];
            for (id, g) in fan_out(s, row, inst.dim, inst.agg) {
                let acc = emb_grad.entry(id).or_insert_with(|| vec![0.0; inst.dim]);
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
            }
        }
        for (&id, row) in &inst.table {
            for k in 0..inst.dim {
                let mut t = inst.table.clone();
                t.get_mut(&id).unwrap()[k] = row[k] + h;
                let up = inst.loss(&inst.model, &t);
                t.get_mut(&id).unwrap()[k] = row[k] - h;
                let down = inst.loss(&inst.model, &t);
                let numeric = (up - down) / (2.0 * h);
                let analytic = emb_grad.get(&id).map_or(0.0, |g| g[k]);
                let e = rel_err(analytic, numeric);
                if e > tolerance {
                    return Err(format!("seed {seed} id {id}[{k}]: analytic {analytic} vs numeric {numeric}"));
                }
                worst = worst.max(e);
            }
        }
    }
    Ok(worst)
}
