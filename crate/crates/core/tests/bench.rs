use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use mugcat_core::bench::{
    measure_fps, render_report, run_sweep, BenchReport, ClipInput, ReportFormat, SweepSpec, DEFAULT_SWEEP_STEPS,
};
use mugcat_core::ingest;
use mugcat_core::protocol::{self, Backends, Stage, StageClient};
use mugcat_core::stubs::{StubLatency, StubTransport};
use mugcat_core::{Clip, Frame, Resolution};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn clips(n: usize, frames: u64) -> Vec<ClipInput> {
    (0..n)
        .map(|c| {
            let fr = (0..frames)
                .map(|i| Frame::new(i, ingest::timestamp_for(i, 25.0), 32, 32, vec![(c as u8).wrapping_mul(31); 3072]).unwrap())
                .collect();
            ClipInput::Decoded(Clip::new(format!("c{c}#0"), format!("c{c}"), 25.0, fr).unwrap())
        })
        .collect()
}

fn slow_recognizer(per_call_ms: u64, load_ms: u64) -> StageClient {
    let latency = StubLatency {
        handshake: Duration::from_millis(load_ms),
        per_call: Duration::from_millis(per_call_ms),
        per_step: Duration::ZERO,
    };
    StageClient::new(Stage::Recognize, Arc::new(StubTransport::with_latency(Stage::Recognize, latency)))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fps_modes_under_injected_latency() {
    // 16 frames per 10 ms call → 1600 FPS while inferring; the 500 ms load
    // only shows up in the infer-and-load scope
    for run in 0..3 {
        let client = slow_recognizer(10, 500);
        let r = measure_fps(clips(20, 16), &client, Duration::from_secs(5)).await.unwrap();
        assert_eq!(r.infer_only.frames, 320);
        assert!(r.infer_only.fps >= r.infer_and_load.fps, "run {run}: {r:?}");
        let fps = r.infer_only.fps;
        assert!((1600.0 * 0.85..=1600.0 * 1.15).contains(&fps), "run {run}: infer-only {fps}");
        assert!(r.infer_and_load.elapsed_s >= 0.5 + 0.2);
    }
}

#[tokio::test]
async fn fps_counts_container_decode_as_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut inputs = Vec::new();
    for c in clips(3, 4) {
        let ClipInput::Decoded(clip) = c else { unreachable!() };
        let p = dir.path().join(format!("{}.mclip", clip.source_id()));
        std::fs::write(&p, ingest::encode_mclip(&clip).unwrap()).unwrap();
        inputs.push(ClipInput::Container(p));
    }
    let r = measure_fps(inputs, &slow_recognizer(0, 0), Duration::from_secs(5)).await.unwrap();
    assert_eq!((r.clips, r.infer_only.frames), (3, 12));
    assert!(r.infer_only.elapsed_s <= r.infer_and_load.elapsed_s);

    let missing = vec![ClipInput::Container(dir.path().join("nope.mclip"))];
    assert!(measure_fps(missing, &slow_recognizer(0, 0), Duration::from_secs(5)).await.is_err());
    assert!(measure_fps(vec![], &slow_recognizer(0, 0), Duration::from_secs(5)).await.is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sweep_latency_grows_with_steps() {
    let latency = StubLatency { per_step: Duration::from_millis(5), ..StubLatency::default() };
    let backends = Backends::from_transports(|s| Arc::new(StubTransport::with_latency(s, latency)));
    let spec = SweepSpec {
        steps: vec![15, 20, 25, 30, 35, 40, 45, 50],
        resolution: Resolution::W384H384,
        k: 2,
        prompt: "a red boat".into(),
        seed: 3,
    };
    let report = run_sweep(&spec, &backends, Duration::from_secs(10)).await.unwrap();
    assert_eq!(report.reference_steps, 50);
    let steps: Vec<u32> = report.rows.iter().map(|r| r.steps).collect();
    assert_eq!(steps, DEFAULT_SWEEP_STEPS);
    assert_eq!(report.row(50).unwrap().fid, Some(0.0));
    // rows run largest-first, so walking them backwards is increasing steps
    let secs: Vec<f64> = report.rows.iter().rev().map(|r| r.seconds_per_batch.unwrap()).collect();
    assert!(secs.windows(2).all(|w| w[0] < w[1]), "{secs:?}");
    assert!(report.rows.iter().all(|r| r.error.is_none() && r.fid.unwrap() >= 0.0));
}

#[tokio::test]
async fn sweep_records_failed_rows() {
    let backends = Backends::from_transports(|s| {
        // synthesize works, features come from the wrong stage
        let stage = if s == Stage::ImageFeatures { Stage::Embed } else { s };
        Arc::new(StubTransport::new(stage))
    });
    let spec = SweepSpec { steps: vec![20], resolution: Resolution::W384H384, k: 2, ..SweepSpec::default() };
    assert!(run_sweep(&spec, &backends, Duration::from_secs(5)).await.is_err());
}

fn render_fixture(name: &str, format: ReportFormat) -> String {
    let bytes = std::fs::read(fixture(name)).unwrap();
    let report: BenchReport = protocol::decode(&bytes).unwrap();
    String::from_utf8(render_report(&report, format)).unwrap()
}

#[test]
fn table_one_fixture_renders_verbatim() {
    let text = render_fixture("table1.json", ReportFormat::Text);
    assert_eq!(text, std::fs::read_to_string(fixture("table1.txt")).unwrap());
    let first = text.lines().nth(1).unwrap();
    let cells: Vec<&str> = first.split('|').map(str::trim).collect();
    assert_eq!(cells, ["I3D", "BSL1K", "46.8", "1429", "95"]);
    let csv = render_fixture("table1.json", ReportFormat::Csv);
    assert!(csv.contains("I3D,BSL1K,46.8,1429,95\r\n"));
    assert!(csv.contains("MML,,20.8,323,104\r\n"));
}

#[test]
fn table_two_fixture_renders_verbatim() {
    let text = render_fixture("table2.json", ReportFormat::Text);
    assert_eq!(text, std::fs::read_to_string(fixture("table2.txt")).unwrap());
    let triples: Vec<Vec<String>> = text
        .lines()
        .skip(1)
        .map(|l| l.split('|').map(|c| c.trim().to_string()).collect())
        .collect();
    let expected = [
        ["50", "0", "35.50"],
        ["45", "33.43", "32.05"],
        ["40", "30.44", "28.66"],
        ["35", "31.70", "25.24"],
        ["30", "31.55", "21.79"],
        ["25", "33.19", "18.39"],
        ["20", "33.51", "14.97"],
        ["15", "40.33", "12.25"],
    ];
    assert_eq!(triples, expected.map(|r| r.map(String::from).to_vec()));
}

#[test]
fn fixtures_survive_json_round_trip() {
    for name in ["table1.json", "table2.json"] {
        let report: BenchReport = protocol::decode(&std::fs::read(fixture(name)).unwrap()).unwrap();
        let json = render_report(&report, ReportFormat::Json);
        let back: BenchReport = protocol::decode(&json).unwrap();
        assert_eq!(back, report);
    }
}
