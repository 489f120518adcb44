use verdin_core::config_space::SoftConfiguration;
use verdin_core::report::{ExperimentParams, Pipeline, RunOutcome};
use verdin_core::sampler::SamplerParams;
use verdin_core::workload::{HardwareProfile, WorkloadSpec};

fn soft_of(values: &[i64]) -> SoftConfiguration {
    SoftConfiguration::new(values.iter().map(|&v| v as f64).collect())
}

struct ArmStats {
    steps: f64,
    mop_ratio: f64,
    recall: f64,
    degraded: f64,
    rollbacks: f64,
    early_exit: f64,
    u_dec: f64,
    k_mean: f64,
    b_mean: f64,
    bits4: f64,
}

fn arm_stats(p: &Pipeline, outcomes: &[RunOutcome]) -> ArmStats {
    let n = outcomes.len() as f64;
    let base_mop = p.op_model.ops_of(&soft_of(&[1000, 128, 8])).mop_mega;
    let mut steps = 0.0;
    let mut mop = 0.0;
    let mut recall = 0.0;
    let mut degraded = 0.0;
    let mut rollbacks = 0.0;
    let mut early = 0.0;
    let mut dec = 0.0;
    let mut dec_n = 0.0;
    let mut k_mean = 0.0;
    let mut b_mean = 0.0;
    let mut bits4 = 0.0;
    let queries = p.eval_queries(outcomes.len());
    for (o, q) in outcomes.iter().zip(&queries) {
        assert_eq!(o.query_id, q.id);
        steps += o.trace.steps as f64;
        let soft = soft_of(&o.config.values);
        mop += p.op_model.ops_of(&soft).mop_mega;
        recall += p.spec.recall(q, soft.values[0], soft.values[1], soft.values[2]);
        degraded += o.trace.degraded as u8 as f64;
        rollbacks += o.trace.rollbacks as f64;
        early += (o.trace.exit == verdin_core::sampler::ExitReason::EarlyExit) as u8 as f64;
        let u = &o.trace.u_history;
        for t in 1..u.len().min(7) {
            dec += (u[t] < u[t - 1]) as u8 as f64;
            dec_n += 1.0;
        }
        k_mean += soft.values[0];
        b_mean += soft.values[1];
        bits4 += (o.config.values[2] == 4) as u8 as f64;
    }
    ArmStats {
        steps: steps / n,
        mop_ratio: mop / n / base_mop,
        recall: recall / n,
        degraded: degraded / n,
        rollbacks: rollbacks / n,
        early_exit: early / n,
        u_dec: dec / dec_n,
        k_mean: k_mean / n,
        b_mean: b_mean / n,
        bits4: bits4 / n,
    }
}

fn print_arms(p: &Pipeline, queries: &[verdin_core::workload::Query], tag: &str) {
    let full = p.params.sampler.clone();
    let g2z = SamplerParams { gamma2: 0.0, ..full.clone() };
    let g1z = SamplerParams { gamma1: 0.0, ..full.clone() };
    for (label, sp) in [("full", &full), ("g2=0", &g2z), ("g1=0", &g1z)] {
        let outcomes = p.run_many(queries, sp, None).unwrap();
        let s = arm_stats(p, &outcomes);
        eprintln!(
            "{tag} {label:<5} steps {:5.2}  mop {:.3}  rec {:.3}  deg {:5.3}  rb {:4.2}  ee {:4.2}  udec {:4.2}  k {:6.0}  b {:4.0}  b4 {:4.2}",
            s.steps, s.mop_ratio, s.recall, s.degraded, s.rollbacks, s.early_exit,
            s.u_dec, s.k_mean, s.b_mean, s.bits4,
        );
    }
}

#[test]
fn probe_trajectory() {
    for m in [2.0f64, 4.0] {
        let mut params = ExperimentParams::default();
        params.scales.carbon *= 4.2 * m;
        params.scales.latency *= 4.2 * m;
        params.scales.quality = 330.0 * m;
        let mut p =
            Pipeline::build(WorkloadSpec::default(), HardwareProfile::intel(), params).unwrap();
        p.guidance.gain = 1e-12;
        let queries = p.eval_queries(120);
        let outcomes = p.run_many(&queries, &p.params.sampler, None).unwrap();
        eprintln!("=== m {m}");
        for t in 0..=18usize {
            let (mut n, mut k, mut b, mut q, mut gu, mut rb) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            let (mut ratio, mut rn) = (0.0, 0.0);
            for o in &outcomes {
                let rec = &o.trace.records;
                if t < rec.len() {
                    let w = p.decoder.decode(&rec[t].z);
                    k += w.values[0];
                    b += w.values[1];
                    q += w.values[2];
                    gu += rec[t].grad_u_norm;
                    rb += rec[t].rollback as u8 as f64;
                    n += 1.0;
                }
                let u = &o.trace.u_history;
                if t < u.len() && t >= 5 {
                    ratio += (u[t - 5] - u[t]) / u[t].abs();
                    rn += 1.0;
                }
            }
            if n > 0.0 {
                let r5 = if rn > 0.0 { ratio / rn } else { f64::NAN };
                eprintln!(
                    "t {t:2} alive {n:3.0}  k {:6.0}  b {:4.0}  bits {:4.2}  gU {:9.2}  rb {:4.2}  r5 {:+.5}",
                    k / n, b / n, q / n, gu / n, rb / n, r5
                );
            }
        }
    }
}

#[test]
fn probe_lambda_pull() {
    let n_eval = 250usize;
    // Cost terms carry 4.2x to undo the soft-count slope attenuation
    // (~0.24 across the range); m then scales the whole landscape, i.e.
    // the per-step travel distance.
    for m in [2.0f64, 3.0, 4.0] {
        let mut params = ExperimentParams::default();
        params.scales.carbon *= 4.2 * m;
        params.scales.latency *= 4.2 * m;
        params.scales.quality = 330.0 * m;
        let pipeline =
            Pipeline::build(WorkloadSpec::default(), HardwareProfile::intel(), params).unwrap();
        let queries = pipeline.eval_queries(n_eval);
        let base_gain = pipeline.guidance.gain;
        eprintln!("=== m {m}  (gain for pull 200: {base_gain:.2})");
        for pull in [0.0f64, 20.0, 60.0] {
            let mut p = pipeline.clone();
            p.guidance.gain = base_gain * pull / 200.0;
            if pull == 0.0 {
                p.guidance.gain = 1e-12;
            }
            print_arms(&p, &queries, &format!("m{m} pull{pull}"));
        }
    }
}
