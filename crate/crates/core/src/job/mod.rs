//! Scheduler-independent job model: specifications, states, status samples
//! and the shared job handle.

mod handle;
mod spec;
mod state;

pub use handle::{record_status, wait, Job, StatusCallback};
pub use spec::{
    validate_spec, EnvironmentPolicy, JobAttributes, JobSpec, ResourceSpec, Violation, WallTime,
    MAX_WALL_TIME,
};
pub use state::{JobState, JobStatus};

/// Whether `from -> to` is an edge of the job state graph.
pub fn validate_transition(from: JobState, to: JobState) -> bool {
    from.can_transition_to(to)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use JobState::*;

    // All 36 ordered pairs, written out row by row from the graph definition.
    const GOLDEN: [[bool; 6]; 6] = [
        //  NEW    QUEUED ACTIVE COMPL  FAILED CANCEL
        [false, true, false, false, false, false], // NEW
        [false, false, true, false, true, true],   // QUEUED
        [false, false, false, true, true, true],   // ACTIVE
        [false, false, false, false, false, false], // COMPLETED
        [false, false, false, false, false, false], // FAILED
        [false, false, false, false, false, false], // CANCELED
    ];

    #[test]
    fn transition_table_matches_golden() {
        for (i, from) in JobState::ALL.into_iter().enumerate() {
            for (j, to) in JobState::ALL.into_iter().enumerate() {
                assert_eq!(
                    validate_transition(from, to),
                    GOLDEN[i][j],
                    "{from} -> {to}"
                );
            }
        }
        assert!(validate_transition(New, Queued));
        assert!(!validate_transition(Completed, Active));
        assert!(!validate_transition(Queued, Completed));
    }

    #[test]
    fn terminal_states() {
        let terminal: Vec<_> = JobState::ALL.into_iter().filter(|s| s.is_terminal()).collect();
        assert_eq!(terminal, [Completed, Failed, Canceled]);
    }

    #[test]
    fn shortest_paths() {
        assert_eq!(New.path_to(Completed).unwrap(), [Queued, Active, Completed]);
        assert_eq!(Queued.path_to(Canceled).unwrap(), [Canceled]);
        assert_eq!(New.path_to(Failed).unwrap(), [Queued, Failed]);
        assert_eq!(Active.path_to(Active).unwrap(), Vec::<JobState>::new());
        assert!(Active.path_to(Queued).is_none());
        assert!(Completed.path_to(Failed).is_none());
    }

    fn any_state() -> impl Strategy<Value = JobState> {
        prop::sample::select(JobState::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn record_status_agrees_with_validate_transition(
            reports in prop::collection::vec(any_state(), 0..24)
        ) {
            let job = Job::new(JobSpec::new("/bin/true"));
            for to in reports {
                let from = job.state();
                let before = job.history().len();
                let status = JobStatus::new(to);
                match job.record_status(status) {
                    Ok(true) => {
                        prop_assert!(validate_transition(from, to));
                        prop_assert_eq!(job.history().len(), before + 1);
                    }
                    Ok(false) => {
                        prop_assert_eq!(from, to);
                        prop_assert_eq!(job.history().len(), before);
                    }
                    Err(_) => {
                        prop_assert!(from != to && !validate_transition(from, to));
                        prop_assert_eq!(job.history().len(), before);
                    }
                }
            }
            let history = job.history();
            for pair in history.windows(2) {
                prop_assert!(validate_transition(pair[0].state, pair[1].state));
            }
        }

        #[test]
        fn path_to_is_a_legal_walk(from in any_state(), to in any_state()) {
            if let Some(path) = from.path_to(to) {
                let mut cur = from;
                for s in &path {
                    prop_assert!(validate_transition(cur, *s));
                    cur = *s;
                }
                prop_assert_eq!(cur, to);
            }
        }
    }
}
