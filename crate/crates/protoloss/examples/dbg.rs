use protoloss::data::{batches, gaussian_blobs};
use protoloss::model::MlpConfig;
use protoloss::trainer::{train, Method, TrainConfig};
use protoloss::{losses, FeatureExtractor, Graph, LossWeights, PrototypeBank, Tensor};
use rand::SeedableRng;

fn min_sep(c: &Tensor) -> f64 {
    let m = c.rows();
    let mut best = 180.0f64;
    for j in 0..m {
        for k in 0..j {
            let (a, b) = (c.row(j), c.row(k));
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            best = best.min((dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    best
}

fn tangential_norm(c: &Tensor, g: &Tensor) -> f64 {
    // mean per-row norm of the gradient component orthogonal to the row
    let m = c.rows();
    let mut sum = 0.0;
    for j in 0..m {
        let (cr, gr) = (c.row(j), g.row(j));
        let c2: f64 = cr.iter().map(|v| v * v).sum();
        let dot: f64 = cr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let tang: f64 = gr
            .iter()
            .zip(cr)
            .map(|(gv, cv)| gv - dot / c2 * cv)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        sum += tang;
    }
    sum / m as f64
}

fn main() {
    let (train_set, test_set) = gaussian_blobs(10, 16, 500, 5.0, 1.0, 42).unwrap();
    let seed = 1u64;
    let mut fx = FeatureExtractor::init(&MlpConfig::new(vec![16, 64, 3], seed + 1)).unwrap();
    let mut bank = PrototypeBank::init(10, 3, 40.0, seed + 2).unwrap();
    let config = TrainConfig {
        epochs: 600, batch_size: 64, method: Method::Dpnp, seed,
        loss_weights: LossWeights::low_dim(),
        ..TrainConfig::default()
    };
    // train in 50-epoch chunks, printing minsep trajectory
    for chunk in 0..12 {
        let mut c = config.clone();
        c.epochs = 50;
        c.seed = seed + chunk;
        train(&mut fx, &mut bank, &train_set, &test_set, &c).unwrap();
        print!("{:5.1} ", min_sep(bank.prototypes()));
    }
    println!(" <- minsep after each 50-epoch chunk");

    // force decomposition at the final state, one representative batch
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
    let batch = &batches(&train_set, 64, &mut rng)[0];
    let mut g = Graph::new();
    let xv = g.leaf(&batch.features);
    let vars = fx.register(&mut g);
    let hv = fx.forward(&mut g, &vars, xv);
    let cv = g.leaf(bank.prototypes());
    let h_val = g.value(hv).clone();
    let sneg = bank.sample_negatives(&h_val, &batch.labels).unwrap();
    let cneg = bank.class_negatives().unwrap();
    let w = LossWeights::low_dim();
    let composed = losses::dpnp_loss(&mut g, hv, cv, &batch.labels, Some(&sneg), Some(&cneg), w, 40.0, losses::TRAIN_EPS);

    let c = bank.prototypes();
    let g_ce = g.grad(composed.ce, &[cv]).unwrap();
    let g_pos = g.grad(composed.pos.unwrap(), &[cv]).unwrap();
    let g_ns = g.grad(composed.neg_sample.unwrap(), &[cv]).unwrap();
    let g_nc = g.grad(composed.neg_class.unwrap(), &[cv]).unwrap();
    println!("tangential |dC| per row: ce {:.3e}  pos*l {:.3e}  ns*l {:.3e}  nc*l {:.3e}",
        tangential_norm(c, &g_ce[0]),
        w.lambda_pos * tangential_norm(c, &g_pos[0]),
        w.lambda_neg_sample * tangential_norm(c, &g_ns[0]),
        w.lambda_neg_class * tangential_norm(c, &g_nc[0]));
}
