//! The fixed (spec, profile, launcher) matrix pinned by the script goldens.

use std::path::{Path, PathBuf};

use psij_core::lrm::{render_submit_script, ScriptContext};
use psij_core::{EnvironmentPolicy, JobSpec, Launchers, SchedulerProfile, WallTime};
use uuid::Uuid;

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/goldens")
}

fn minimal() -> JobSpec {
    JobSpec::new("/bin/echo").arg("hello world")
}

fn mpi_geometry() -> JobSpec {
    let mut s = JobSpec::new("./sim").args(["--steps", "100"]);
    s.launcher = Some("mpirun".into());
    s.name = Some("sim run".into());
    s.directory = Some("/scratch/run 1".into());
    s.stdout_path = Some("/scratch/out.txt".into());
    s.stderr_path = Some("/scratch/err.txt".into());
    s.resources.node_count = Some(2);
    s.resources.processes_per_node = Some(4);
    s.attributes.duration = Some(WallTime::from_secs(5400));
    s.attributes.queue_name = Some("debug".into());
    s.attributes.account = Some("proj42".into());
    s.environment_policy = Some(EnvironmentPolicy::InheritAll);
    s.environment_overrides.insert("OMP_NUM_THREADS".into(), "2".into());
    s.environment_overrides.insert("GREETING".into(), "it's here".into());
    s
}

fn native_launcher(launcher: &str) -> JobSpec {
    let mut s = JobSpec::new("app").arg("-x");
    s.launcher = Some(launcher.into());
    s.resources.process_count = Some(8);
    s.resources.processes_per_node = Some(4);
    s.resources.cpu_cores_per_process = Some(2);
    s.resources.gpu_cores_per_process = Some(1);
    s.resources.exclusive_node_use = Some(true);
    s.attributes.duration = Some(WallTime::from_secs(90));
    s.attributes.reservation = Some("resv-7".into());
    s.attributes.custom.insert("mail-type".into(), "END".into());
    s
}

fn multi_merged() -> JobSpec {
    let mut s = JobSpec::new("/bin/sh").args(["-c", "echo $PSIJ_RANK \"$1\"", "arg; rm -rf /"]);
    s.launcher = Some("multi".into());
    s.resources.process_count = Some(3);
    s.stdin_path = Some("/data/in.txt".into());
    s.stdout_path = Some("/data/all.log".into());
    s.stderr_path = Some("/data/all.log".into());
    s.attributes.merge_output = true;
    s.environment_policy = Some(EnvironmentPolicy::InheritNone);
    s.environment_overrides.insert("MODE".into(), "batch".into());
    s
}

/// Twelve named cases: four specs for each of the three profiles.
pub fn cases() -> Vec<(String, JobSpec, SchedulerProfile)> {
    let profiles = [
        ("slurm", SchedulerProfile::slurm(), "srun"),
        ("pbs", SchedulerProfile::pbs(), "aprun"),
        ("lsf", SchedulerProfile::lsf(), "jsrun"),
    ];
    let mut out = Vec::new();
    for (pname, profile, native) in profiles {
        out.push((format!("{pname}-minimal-single"), minimal(), profile.clone()));
        out.push((format!("{pname}-geometry-mpirun"), mpi_geometry(), profile.clone()));
        out.push((format!("{pname}-attributes-{native}"), native_launcher(native), profile.clone()));
        out.push((format!("{pname}-merged-multi"), multi_merged(), profile));
    }
    out
}

pub fn render(spec: &JobSpec, profile: &SchedulerProfile) -> String {
    let launchers = Launchers::builtin();
    render_submit_script(
        spec,
        profile,
        launchers.for_spec(spec).expect("launcher exists"),
        &ScriptContext {
            job_id: Uuid::from_u128(0x5eed),
            work_directory: Path::new("/home/user/.psij/work"),
        },
    )
    .expect("matrix case renders")
}

/// Compares every case with its golden file. `UPDATE_GOLDENS=1` rewrites
/// them instead. Returns the names of mismatching cases.
pub fn check_all() -> Vec<String> {
    let dir = golden_dir();
    let update = std::env::var_os("UPDATE_GOLDENS").is_some_and(|v| v == "1");
    let mut bad = Vec::new();
    for (name, spec, profile) in cases() {
        let got = render(&spec, &profile);
        let path = dir.join(format!("{name}.sh"));
        if update {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &got).unwrap();
            continue;
        }
        match std::fs::read_to_string(&path) {
            Ok(want) if want == got => {}
            Ok(want) => {
                eprintln!("{name}: rendered script differs from {}", path.display());
                for (i, (w, g)) in want.lines().zip(got.lines()).enumerate() {
                    if w != g {
                        eprintln!("  line {}: want {w:?}\n           got  {g:?}", i + 1);
                        break;
                    }
                }
                bad.push(name);
            }
            Err(e) => {
                eprintln!("{name}: {}: {e}", path.display());
                bad.push(name);
            }
        }
    }
    bad
}
