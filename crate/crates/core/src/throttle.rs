//! Frequency throttling: the lowest GPU clock at which the committed
//! scoreboard still meets both SLOs, and the actuator that applies it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perfmodel::{FrequencyDomain, PerfModel};
use crate::projection::{ProjectionSet, Scoreboard};
use crate::scheduler::{check_tbt, compute_plan, e2e_outcome, SloConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyDecision {
    pub target_mhz: u32,
    /// A lost query is on the scoreboard, so the search was skipped.
    pub bypassed: bool,
    pub evaluations: u32,
}

/// Everything the SLO predicate reads, borrowed from one engine.
#[derive(Debug, Clone, Copy)]
pub struct ThrottleState<'a> {
    pub proj: &'a ProjectionSet,
    pub sb: &'a Scoreboard,
    pub deadlines: &'a BTreeMap<u64, f64>,
    pub tp: u32,
    pub model: &'a dyn PerfModel,
    pub slo: &'a SloConfig,
    pub now: f64,
    /// Slack, in seconds, every deadline must keep beyond the projection.
    pub headroom: f64,
}

/// TBT and E2E checks at `freq_mhz`; KV does not depend on the clock.
pub fn slo_met_at(freq_mhz: u32, st: &ThrottleState<'_>) -> Result<bool> {
    if st.proj.is_empty() {
        return Ok(true);
    }
    let plan = compute_plan(st.proj, st.tp, freq_mhz as f64, st.model)?;
    if !check_tbt(&plan, st.slo) {
        return Ok(false);
    }
    let e2e = e2e_outcome(
        &plan,
        st.sb.entries(),
        st.sb.current_iter(),
        st.now + st.headroom,
        st.deadlines,
    )?;
    Ok(e2e.ok())
}

/// Smallest domain level meeting the SLOs. Binary search when the model is
/// monotone in frequency, an ascending scan otherwise.
pub fn min_slo_frequency(
    st: &ThrottleState<'_>,
    domain: &FrequencyDomain,
) -> Result<FrequencyDecision> {
    if st.sb.has_lost() {
        return Ok(FrequencyDecision {
            target_mhz: domain.max_mhz,
            bypassed: true,
            evaluations: 0,
        });
    }
    let mut evaluations = 0;
    let mut pred = |i: usize| {
        evaluations += 1;
        slo_met_at(domain.level(i), st)
    };
    let top = domain.len() - 1;
    let found = if st.model.monotone_in_freq() {
        if !pred(top)? {
            return Err(Error::NoCompliantFrequency);
        }
        let (mut lo, mut hi) = (0, top);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if pred(mid)? {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    } else {
        let mut hit = None;
        for i in 0..=top {
            if pred(i)? {
                hit = Some(i);
                break;
            }
        }
        hit.ok_or(Error::NoCompliantFrequency)?
    };
    Ok(FrequencyDecision {
        target_mhz: domain.level(found),
        bypassed: false,
        evaluations,
    })
}

/// A frequency switch in flight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendingSwitch {
    pub target_mhz: u32,
    pub done_at: f64,
    /// Matches the completion event to the request that scheduled it.
    pub generation: u64,
}

/// Applies frequency targets with a fixed switch latency. The old clock
/// stays in effect until the switch completes; a newer request replaces a
/// pending one.
#[derive(Debug, Clone)]
pub struct FrequencyActuator {
    effective: u32,
    pending: Option<PendingSwitch>,
    latency: f64,
    generation: u64,
    switches: u64,
}

impl FrequencyActuator {
    pub fn new(initial_mhz: u32, latency: f64) -> Result<Self> {
        if !(latency >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "switch latency {latency} < 0"
            )));
        }
        Ok(Self {
            effective: initial_mhz,
            pending: None,
            latency,
            generation: 0,
            switches: 0,
        })
    }

    pub fn effective_mhz(&self) -> u32 {
        self.effective
    }

    /// Where the clock is heading: the pending target, else the current one.
    pub fn target_mhz(&self) -> u32 {
        self.pending.map_or(self.effective, |p| p.target_mhz)
    }

    pub fn pending(&self) -> Option<PendingSwitch> {
        self.pending
    }

    /// Completed switches so far.
    pub fn switches(&self) -> u64 {
        self.switches
    }

    /// Requests `target_mhz` at `now`. Returns the switch whose completion
    /// the caller must deliver through [`FrequencyActuator::complete`], if any.
    pub fn request(&mut self, target_mhz: u32, now: f64) -> Option<PendingSwitch> {
        if target_mhz == self.target_mhz() {
            return None;
        }
        self.generation += 1;
        if target_mhz == self.effective {
            // back to where we are: drop the in-flight switch
            self.pending = None;
            return None;
        }
        if self.latency == 0.0 {
            self.pending = None;
            self.effective = target_mhz;
            self.switches += 1;
            return None;
        }
        let p = PendingSwitch {
            target_mhz,
            done_at: now + self.latency,
            generation: self.generation,
        };
        self.pending = Some(p);
        Some(p)
    }

    /// Completes the switch tagged `generation`; stale completions are ignored.
    pub fn complete(&mut self, generation: u64) -> bool {
        match self.pending {
            Some(p) if p.generation == generation => {
                self.effective = p.target_mhz;
                self.pending = None;
                self.switches += 1;
                true
            }
            _ => false,
        }
    }
}

/// One row of the frequency timeline export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub time: f64,
    pub engine: usize,
    pub target_mhz: u32,
    pub effective_mhz: u32,
    pub bypassed: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::{SurrogateModel, SurrogateParams};
    use crate::scheduler::{AdmissionConfig, Scheduler};
    use crate::trace::Query;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn surrogate() -> SurrogateModel {
        SurrogateModel::new(SurrogateParams::default()).unwrap()
    }

    /// A scheduler filled with random admitted queries, advanced a little.
    fn random_state(seed: u64, m: &dyn PerfModel) -> (Scheduler, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AdmissionConfig {
            tp: [1, 2, 4][rng.random_range(0..3)],
            kv_capacity: 1050,
            max_freq_mhz: 1410.0,
            slo: SloConfig::new(0.2, rng.random_range(10.0..60.0)).unwrap(),
            slo_checks: true,
        };
        let mut s = Scheduler::new(cfg, 64).unwrap();
        let mut now = 0.0;
        for id in 0..rng.random_range(1..60) {
            let mut q = Query::new(
                id,
                now,
                rng.random_range(1..1500),
                rng.random_range(1..1200),
            );
            q.predicted_gen_len = q.true_gen_len;
            s.try_admit(&q, now, m).unwrap();
            for _ in 0..rng.random_range(0..20) {
                let k = s.scoreboard().current_iter();
                let done: Vec<u64> = s
                    .scoreboard()
                    .entries()
                    .filter(|e| e.end_iter() == k + 1)
                    .map(|e| e.query_id)
                    .collect();
                now += 0.03;
                s.advance(&done).unwrap();
            }
        }
        (s, now)
    }

    fn state<'a>(
        s: &'a Scheduler,
        proj: &'a ProjectionSet,
        m: &'a dyn PerfModel,
        now: f64,
    ) -> ThrottleState<'a> {
        ThrottleState {
            proj,
            sb: s.scoreboard(),
            deadlines: s.deadlines(),
            tp: s.config().tp,
            model: m,
            slo: &s.config().slo,
            now,
            headroom: 0.0,
        }
    }

    #[test]
    fn binary_search_equals_linear_scan() {
        let m = surrogate();
        let domain = FrequencyDomain::default();
        let mut checked = 0;
        for seed in 0..250 {
            let (s, now) = random_state(seed, &m);
            let proj = s.scoreboard().project();
            let st = state(&s, &proj, &m, now);
            let scan = domain
                .levels()
                .into_iter()
                .find(|&f| slo_met_at(f, &st).unwrap());
            match min_slo_frequency(&st, &domain) {
                Ok(d) if d.bypassed => assert_eq!(d.target_mhz, 1410),
                Ok(d) => {
                    assert_eq!(Some(d.target_mhz), scan);
                    assert!(d.evaluations <= 8);
                    checked += 1;
                }
                Err(Error::NoCompliantFrequency) => assert!(!slo_met_at(1410, &st).unwrap()),
                Err(e) => panic!("{e}"),
            }
        }
        assert!(checked >= 100, "only {checked} non-bypassed states");
    }

    #[test]
    fn closed_form_threshold() {
        // IPS = A f / f_max, batch and KV insensitive
        let p = SurrogateParams {
            alpha: 1.0,
            gamma: 0.0,
            kappa: 0.0,
            ..SurrogateParams::default()
        };
        let m = SurrogateModel::new(p).unwrap();
        let a = m.amplitude(1).unwrap();
        let mut sb = Scoreboard::new(64).unwrap();
        let n = 500u32;
        sb.insert(sb.candidate(0, 10, n)).unwrap();
        let proj = sb.project();
        let slo = SloConfig::new(0.2, 30.0).unwrap();
        let deadlines = BTreeMap::from([(0, 30.0)]);
        let now = 5.0;
        let st = ThrottleState {
            proj: &proj,
            sb: &sb,
            deadlines: &deadlines,
            tp: 1,
            model: &m,
            slo: &slo,
            now,
            headroom: 0.0,
        };
        // E2E: now + n f_max / (A f) < deadline; TBT: f_max / (A f) <= 0.2
        let f_e2e = n as f64 * 1410.0 / (a * (30.0 - now));
        let f_tbt = 1410.0 / (a * 0.2);
        let threshold = f_e2e.max(f_tbt);
        for f in FrequencyDomain::default().levels() {
            if (f as f64 - threshold).abs() < 1e-6 {
                continue;
            }
            assert_eq!(slo_met_at(f, &st).unwrap(), f as f64 > threshold, "f={f}");
        }
        let d = min_slo_frequency(&st, &FrequencyDomain::default()).unwrap();
        assert_eq!(
            d.target_mhz,
            (210..=1410)
                .step_by(15)
                .find(|&f| f as f64 > threshold)
                .unwrap()
        );
    }

    #[test]
    fn all_pass_and_only_max() {
        let m = surrogate();
        let domain = FrequencyDomain::default();
        let mut sb = Scoreboard::new(64).unwrap();
        sb.insert(sb.candidate(0, 10, 20)).unwrap();
        let proj = sb.project();
        let slo = SloConfig::new(0.2, 1000.0).unwrap();
        let deadlines = BTreeMap::from([(0, 1000.0)]);
        let mut st = ThrottleState {
            proj: &proj,
            sb: &sb,
            deadlines: &deadlines,
            tp: 2,
            model: &m,
            slo: &slo,
            now: 0.0,
            headroom: 0.0,
        };
        let d = min_slo_frequency(&st, &domain).unwrap();
        assert_eq!((d.target_mhz, d.bypassed), (210, false));
        assert!(d.evaluations <= 8);

        // deadline just above the max-frequency completion time
        let t_max: f64 = compute_plan(&proj, 2, 1410.0, &m).unwrap().cumulative()[19];
        let t_next: f64 = compute_plan(&proj, 2, 1395.0, &m).unwrap().cumulative()[19];
        let tight = BTreeMap::from([(0, (t_max + t_next) / 2.0)]);
        st.deadlines = &tight;
        assert_eq!(min_slo_frequency(&st, &domain).unwrap().target_mhz, 1410);

        let impossible = BTreeMap::from([(0, t_max)]);
        st.deadlines = &impossible;
        assert!(matches!(
            min_slo_frequency(&st, &domain),
            Err(Error::NoCompliantFrequency)
        ));
    }

    #[test]
    fn lost_query_forces_max() {
        let m = surrogate();
        let mut sb = Scoreboard::new(64).unwrap();
        let mut e = sb.candidate(0, 10, 20);
        e.lost = true;
        sb.insert(e).unwrap();
        let proj = sb.project();
        let slo = SloConfig::new(0.2, 1000.0).unwrap();
        let deadlines = BTreeMap::new();
        let st = ThrottleState {
            proj: &proj,
            sb: &sb,
            deadlines: &deadlines,
            tp: 1,
            model: &m,
            slo: &slo,
            now: 0.0,
            headroom: 0.0,
        };
        let d = min_slo_frequency(&st, &FrequencyDomain::default()).unwrap();
        assert_eq!(
            d,
            FrequencyDecision {
                target_mhz: 1410,
                bypassed: true,
                evaluations: 0
            }
        );
    }

    #[test]
    fn non_monotone_model_scans() {
        #[derive(Debug)]
        struct Bumpy;
        impl PerfModel for Bumpy {
            fn predict_ips(&self, _: u32, _: u32, _: u32, f: f64) -> f64 {
                // fast only at 300 MHz and from 1200 MHz up
                if f == 300.0 || f >= 1200.0 {
                    100.0
                } else {
                    1.0
                }
            }
            fn monotone_in_freq(&self) -> bool {
                false
            }
        }
        let mut sb = Scoreboard::new(64).unwrap();
        sb.insert(sb.candidate(0, 1, 5)).unwrap();
        let proj = sb.project();
        let slo = SloConfig::new(0.2, 100.0).unwrap();
        let deadlines = BTreeMap::from([(0, 100.0)]);
        let st = ThrottleState {
            proj: &proj,
            sb: &sb,
            deadlines: &deadlines,
            tp: 1,
            model: &Bumpy,
            slo: &slo,
            now: 0.0,
            headroom: 0.0,
        };
        let d = min_slo_frequency(&st, &FrequencyDomain::default()).unwrap();
        assert_eq!(d.target_mhz, 300);
        assert_eq!(d.evaluations, 7);
    }

    #[test]
    fn actuator_semantics() {
        let mut a = FrequencyActuator::new(1410, 0.2).unwrap();
        assert_eq!(a.request(1410, 0.0), None);

        let p = a.request(900, 10.0).unwrap();
        assert!((p.done_at - 10.2).abs() < 1e-12);
        assert_eq!((a.effective_mhz(), a.target_mhz()), (1410, 900));
        assert!(a.complete(p.generation));
        assert_eq!(a.effective_mhz(), 900);

        // second request 50 ms later supersedes the first
        let first = a.request(600, 20.0).unwrap();
        let second = a.request(750, 20.05).unwrap();
        assert!(!a.complete(first.generation));
        assert_eq!(a.effective_mhz(), 900);
        assert!(a.complete(second.generation));
        assert_eq!(a.effective_mhz(), 750);
        assert_eq!(a.switches(), 2);

        // returning to the current clock cancels the pending switch
        let p = a.request(300, 30.0).unwrap();
        assert_eq!(a.request(750, 30.1), None);
        assert!(!a.complete(p.generation));
        assert_eq!(a.effective_mhz(), 750);

        let mut instant = FrequencyActuator::new(1410, 0.0).unwrap();
        assert_eq!(instant.request(600, 1.0), None);
        assert_eq!(instant.effective_mhz(), 600);
        assert!(FrequencyActuator::new(1410, -1.0).is_err());
    }

    #[test]
    fn controller_latency_under_load() {
        use std::time::Instant;
        let m = surrogate();
        let cfg = AdmissionConfig {
            tp: 4,
            kv_capacity: u32::MAX,
            max_freq_mhz: 1410.0,
            slo: SloConfig::new(10.0, 1e6).unwrap(),
            slo_checks: true,
        };
        let mut s = Scheduler::new(cfg, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for id in 0..511 {
            let mut q = Query::new(id, 0.0, rng.random_range(1..2048), 4096);
            q.predicted_gen_len = rng.random_range(1..=4096);
            s.try_admit(&q, 0.0, &m).unwrap();
        }
        let mut q = Query::new(511, 0.0, 100, 4096);
        q.predicted_gen_len = 4096;
        let start = Instant::now();
        s.try_admit(&q, 0.0, &m).unwrap();
        let proj = s.scoreboard().project();
        let st = state(&s, &proj, &m, 0.0);
        min_slo_frequency(&st, &FrequencyDomain::default()).unwrap();
        let took = start.elapsed().as_secs_f64();
        assert_eq!(s.scoreboard().len(), 512);
        assert!(took < 0.035, "admission + throttle took {took}s");
    }
}
