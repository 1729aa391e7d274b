//! Analytic gradients against central finite differences, for every graph op
//! and for each training loss on tiny models with fixed draws.

use perfusion_core::diffusion::{
    sft_loss, Denoiser, DiffusionConfig, Draws, NoiseSchedule, ScheduleConfig, SftSample, UNetConfig,
};
use perfusion_core::groupdpo::{
    group_dpo_loss, pairwise_dpo_loss, per_sample_scores, reference_copy, GroupDraws, PreferenceGroup,
};
use perfusion_core::numerics::gradcheck::{max_param_error, perturb, rel_err, STEP as H};
use perfusion_core::numerics::{Graph, Var};
use perfusion_core::personalization::UserProfile;
use perfusion_core::reward::{group_loss, GroupInput, RewardConfig, RewardModel, TowerConfig, Wiring};
use perfusion_core::rng::{normal_vec, stream};
use proptest::prelude::*;

const TOL: f64 = 1e-4;

/// Checks `d/dx sum(build(x) ⊙ w)` for every input coordinate.
fn check_op(inputs: &[(usize, usize)], build: impl Fn(&Graph, &[Var]) -> Var, seed: u64) -> f64 {
    let mut r = stream(seed, "gradcheck/op");
    let data: Vec<Vec<f64>> = inputs.iter().map(|(a, b)| normal_vec(&mut r, a * b)).collect();
    let weights_seed = seed ^ 0x5eed;
    let eval = |data: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(data)
            .map(|(&(a, b), d)| g.variable(a, b, d.clone()).unwrap())
            .collect();
        let out = build(&g, &vars);
        let (rows, cols) = g.shape(out);
        let w = g
            .constant(rows, cols, normal_vec(&mut stream(weights_seed, "w"), rows * cols))
            .unwrap();
        let loss = g.sum(g.mul(out, w).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .map(|v| {
                grads
                    .get(*v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.shape(*v).0 * g.shape(*v).1])
            })
            .collect();
        (g.scalar(loss), gs)
    };
    let (_, analytic) = eval(&data);
    let mut worst: f64 = 0.0;
    for k in 0..data.len() {
        for i in 0..data[k].len() {
            let mut p = data.clone();
            p[k][i] += H;
            let mut m = data.clone();
            m[k][i] -= H;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k][i], fd));
        }
    }
    worst
}

#[test]
fn every_graph_op_matches_finite_differences() {
    type Build = Box<dyn Fn(&Graph, &[Var]) -> Var>;
    type Case = (&'static str, Vec<(usize, usize)>, Build);
    let cases: Vec<Case> = vec![
        (
            "matmul",
            vec![(3, 4), (4, 2)],
            Box::new(|g: &Graph, v: &[Var]| g.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "add",
            vec![(2, 3), (2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            vec![(2, 3), (2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![(2, 3), (2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.mul(v[0], v[1]).unwrap()),
        ),
        (
            "add_row",
            vec![(3, 4), (1, 4)],
            Box::new(|g: &Graph, v: &[Var]| g.add_row(v[0], v[1]).unwrap()),
        ),
        (
            "affine",
            vec![(2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.affine(v[0], -1.5, 0.3).unwrap()),
        ),
        (
            "scale",
            vec![(2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.scale(v[0], 2.5).unwrap()),
        ),
        (
            "neg",
            vec![(2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.neg(v[0]).unwrap()),
        ),
        (
            "sigmoid",
            vec![(2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.sigmoid(v[0]).unwrap()),
        ),
        (
            "gelu",
            vec![(2, 5)],
            Box::new(|g: &Graph, v: &[Var]| g.gelu(v[0]).unwrap()),
        ),
        (
            "square",
            vec![(2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.square(v[0]).unwrap()),
        ),
        (
            "exp",
            vec![(2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.exp(v[0]).unwrap()),
        ),
        (
            "ln_clamped",
            vec![(2, 3)],
            Box::new(|g: &Graph, v: &[Var]| {
                let p = g.sigmoid(v[0]).unwrap();
                g.ln_clamped(p, 1e-12, 1.0).unwrap()
            }),
        ),
        (
            "log_sigmoid",
            vec![(2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.log_sigmoid(v[0]).unwrap()),
        ),
        (
            "sum",
            vec![(2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.sum(v[0]).unwrap()),
        ),
        (
            "mean",
            vec![(2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.mean(v[0]).unwrap()),
        ),
        (
            "sum_axis0",
            vec![(3, 4)],
            Box::new(|g: &Graph, v: &[Var]| g.sum_axis(v[0], 0).unwrap()),
        ),
        (
            "sum_axis1",
            vec![(3, 4)],
            Box::new(|g: &Graph, v: &[Var]| g.sum_axis(v[0], 1).unwrap()),
        ),
        (
            "softmax0",
            vec![(3, 4)],
            Box::new(|g: &Graph, v: &[Var]| g.softmax(v[0], 0).unwrap()),
        ),
        (
            "softmax1",
            vec![(3, 4)],
            Box::new(|g: &Graph, v: &[Var]| g.softmax(v[0], 1).unwrap()),
        ),
        (
            "logsumexp0",
            vec![(3, 4)],
            Box::new(|g: &Graph, v: &[Var]| g.logsumexp(v[0], 0).unwrap()),
        ),
        (
            "logsumexp1",
            vec![(3, 4)],
            Box::new(|g: &Graph, v: &[Var]| g.logsumexp(v[0], 1).unwrap()),
        ),
        (
            "cosine_rows",
            vec![(3, 4), (3, 4)],
            Box::new(|g: &Graph, v: &[Var]| g.cosine_rows(v[0], v[1]).unwrap()),
        ),
        (
            "row_scale",
            vec![(3, 4), (3, 1)],
            Box::new(|g: &Graph, v: &[Var]| g.row_scale(v[0], v[1]).unwrap()),
        ),
        (
            "concat_cols",
            vec![(2, 3), (2, 2)],
            Box::new(|g: &Graph, v: &[Var]| g.concat_cols(&[v[0], v[1]]).unwrap()),
        ),
        (
            "slice_cols",
            vec![(2, 5)],
            Box::new(|g: &Graph, v: &[Var]| g.slice_cols(v[0], 1, 4).unwrap()),
        ),
        (
            "gather_rows",
            vec![(4, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.gather_rows(v[0], &[2, 0, 2, 3]).unwrap()),
        ),
        (
            "gather_cols",
            vec![(3, 4)],
            Box::new(|g: &Graph, v: &[Var]| g.gather_cols(v[0], &[3, 3, 1]).unwrap()),
        ),
        (
            "repeat_rows",
            vec![(2, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.repeat_rows(v[0], 3).unwrap()),
        ),
        (
            "mean_pool",
            vec![(6, 3)],
            Box::new(|g: &Graph, v: &[Var]| g.mean_pool(v[0], 3).unwrap()),
        ),
        (
            "reshape",
            vec![(2, 6)],
            Box::new(|g: &Graph, v: &[Var]| g.reshape(v[0], 4, 3).unwrap()),
        ),
        (
            "transpose",
            vec![(2, 5)],
            Box::new(|g: &Graph, v: &[Var]| g.transpose(v[0]).unwrap()),
        ),
        (
            "layer_norm",
            vec![(3, 5), (1, 5), (1, 5)],
            Box::new(|g: &Graph, v: &[Var]| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        (
            "attention",
            vec![(6, 4), (6, 4), (6, 4)],
            Box::new(|g: &Graph, v: &[Var]| g.attention(v[0], v[1], v[2], 3, 2).unwrap()),
        ),
    ];
    for (i, (name, shapes, build)) in cases.iter().enumerate() {
        let worst = check_op(shapes, build, i as u64);
        assert!(worst < TOL, "{name}: max relative error {worst:e}");
    }
}

fn tiny_diffusion() -> (Denoiser, NoiseSchedule) {
    let cfg = DiffusionConfig {
        unet: UNetConfig {
            item_dim: 4,
            cond_dim: 3,
            time_dim: 4,
            emb_dim: 8,
            widths: [8, 8, 8],
            mid: 8,
        },
        schedule: ScheduleConfig {
            steps: 20,
            ..ScheduleConfig::default()
        },
        cardinalities: vec![3, 4],
        embed_dim: 2,
        cross_layers: 1,
    };
    let sched = NoiseSchedule::linear(&cfg.schedule).unwrap();
    let mut m = Denoiser::new(cfg, 3).unwrap();
    m.attach_branch(4).unwrap();
    m.set_trainable(perfusion_core::diffusion::Trainable::All);
    (m, sched)
}

fn profiles() -> Vec<UserProfile> {
    vec![
        UserProfile::new(vec![0, 3]),
        UserProfile::new(vec![2, 1]),
        UserProfile::new(vec![1, 1]),
    ]
}

#[test]
fn denoising_loss_gradient() {
    let (mut m, sched) = tiny_diffusion();
    perturb(&mut m, 1);
    let mut r = stream(5, "sft");
    let users = profiles();
    let batch: Vec<SftSample> = users
        .iter()
        .map(|u| SftSample {
            item: normal_vec(&mut r, 4),
            condition: normal_vec(&mut r, 3),
            profile: Some(u.clone()),
        })
        .collect();
    let draws = Draws::sample(3, 4, sched.steps(), &mut r);
    let refs: Vec<&SftSample> = batch.iter().collect();
    let worst = max_param_error(&mut m, |m, g| sft_loss(g, m, &sched, &refs, &draws).unwrap());
    assert!(worst < TOL, "max relative error {worst:e}");
}

fn preference_fixture(np: usize, nn: usize) -> (Vec<PreferenceGroup>, Vec<GroupDraws>) {
    let mut r = stream(9, "dpo");
    let groups: Vec<PreferenceGroup> = profiles()
        .into_iter()
        .take(2)
        .map(|u| PreferenceGroup {
            positives: (0..np).map(|_| normal_vec(&mut r, 4)).collect(),
            negatives: (0..nn).map(|_| normal_vec(&mut r, 4)).collect(),
            condition: normal_vec(&mut r, 3),
            profile: Some(u),
        })
        .collect();
    let draws = groups.iter().map(|gr| GroupDraws::sample(gr, 4, 20, &mut r)).collect();
    (groups, draws)
}

#[test]
fn group_preference_loss_gradient() {
    let (mut m, sched) = tiny_diffusion();
    let reference = reference_copy(&m);
    perturb(&mut m, 2);
    let (groups, draws) = preference_fixture(2, 3);
    let refs: Vec<&PreferenceGroup> = groups.iter().collect();
    // with β in the thousands the finite-difference truncation error alone
    // exceeds the tolerance, so the check runs at a small β
    let worst = max_param_error(&mut m, |m, g| {
        let s = per_sample_scores(g, m, &reference, &sched, &refs, &draws).unwrap();
        group_dpo_loss(g, s, &refs, 0.5).unwrap()
    });
    assert!(worst < TOL, "max relative error {worst:e}");
}

#[test]
fn pairwise_preference_loss_gradient() {
    let (mut m, sched) = tiny_diffusion();
    let reference = reference_copy(&m);
    perturb(&mut m, 3);
    let (groups, draws) = preference_fixture(1, 1);
    let refs: Vec<&PreferenceGroup> = groups.iter().collect();
    let worst = max_param_error(&mut m, |m, g| {
        let s = per_sample_scores(g, m, &reference, &sched, &refs, &draws).unwrap();
        pairwise_dpo_loss(g, s, refs.len(), 0.5).unwrap()
    });
    assert!(worst < TOL, "max relative error {worst:e}");
}

#[test]
fn reward_model_group_loss_gradient() {
    let cfg = RewardConfig {
        tower: TowerConfig {
            width: 8,
            layers: 1,
            heads: 2,
            ffn_hidden: 8,
            out_dim: 4,
        },
        item_dim: 4,
        item_tokens: 2,
        cond_dim: 3,
        cond_bins: 2,
        cardinalities: vec![3, 4],
        embed_dim: 2,
        cross_layers: 1,
        wiring: Some(Wiring::Duplicated),
    };
    let mut m = RewardModel::new(cfg, 7).unwrap();
    m.set_backbone_trainable(true);
    perturb(&mut m, 4);
    let mut r = stream(11, "rm");
    let users = profiles();
    let conds: Vec<Vec<f64>> = (0..2).map(|_| normal_vec(&mut r, 3)).collect();
    let items: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| (0..3).map(|_| normal_vec(&mut r, 4)).collect())
        .collect();
    let labels = vec![vec![1, 0, 0], vec![0, 1, 1]];
    let worst = max_param_error(&mut m, |m, g| {
        let inputs: Vec<GroupInput<'_>> = (0..2)
            .map(|i| GroupInput {
                condition: &conds[i],
                items: &items[i],
                profile: &users[i],
            })
            .collect();
        let s = m.score_batch(g, &inputs).unwrap();
        group_loss(g, s, &labels).unwrap()
    });
    assert!(worst < TOL, "max relative error {worst:e}");
}

fn row_values(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in prop::collection::vec(-30.0f64..30.0, 6), c in -100.0f64..100.0) {
        let g = Graph::new();
        let a = g.constant(2, 3, x.clone()).unwrap();
        let b = g.constant(2, 3, x.iter().map(|v| v + c).collect()).unwrap();
        let sa = row_values(&g, g.softmax(a, 1).unwrap());
        let sb = row_values(&g, g.softmax(b, 1).unwrap());
        for r in 0..2 {
            let s: f64 = sa[r * 3..r * 3 + 3].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        for (p, q) in sa.iter().zip(&sb) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_bounds_and_shift(x in prop::collection::vec(-700.0f64..700.0, 1..8), c in -50.0f64..50.0) {
        let n = x.len();
        let g = Graph::new();
        let a = g.constant(1, n, x.clone()).unwrap();
        let b = g.constant(1, n, x.iter().map(|v| v + c).collect()).unwrap();
        let la = g.scalar(g.logsumexp(a, 1).unwrap());
        let lb = g.scalar(g.logsumexp(b, 1).unwrap());
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(la.is_finite());
        prop_assert!(la >= max && la <= max + (n as f64).ln() + 1e-12);
        prop_assert!((lb - la - c).abs() < 1e-9);
    }
}
