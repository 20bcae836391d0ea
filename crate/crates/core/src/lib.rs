//! Uniform job submission and monitoring for batch schedulers (Slurm, PBS,
//! LSF) and local processes.
//!
//! ```no_run
//! use psij_core::{ExecutorConfig, Job, JobSpec, Registry};
//!
//! let registry = Registry::with_builtins();
//! let executor = registry.get_executor("local", &ExecutorConfig::default())?;
//! let job = Job::new(JobSpec::new("/bin/echo").arg("hello"));
//! executor.submit(&job)?;
//! let status = job.wait(None)?;
//! println!("{} {:?}", status.state, status.exit_code);
//! # Ok::<(), psij_core::Error>(())
//! ```

pub mod error;
pub mod executor;
pub mod job;
pub mod launcher;
pub mod local;
pub mod lrm;

pub use error::{Error, Result};
pub use executor::{BatchExecutor, Executor, ExecutorConfig, Registry};
pub use job::{
    validate_spec, validate_transition, EnvironmentPolicy, Job, JobAttributes, JobSpec, JobState,
    JobStatus, ResourceSpec, StatusCallback, Violation, WallTime,
};
pub use launcher::{LauncherDescriptor, Launchers};
pub use local::LocalExecutor;
pub use lrm::{SchedulerKind, SchedulerProfile};
