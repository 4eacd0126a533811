use std::process::Command;

fn pgav() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pgav"))
}

#[test]
fn exit_codes() {
    let out = pgav().arg("--bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = pgav()
        .args(["stats", "--asset", "/nonexistent/a.pgav"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn demo_stats_and_stream_sim() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    std::fs::write(
        &config,
        r#"{ "scene": { "subdivisions": 0, "image_size": 24, "focal": 28, "camera_count": 2, "frame_count": 1 },
            "fit": { "iterations": 12, "growth": { "step_k": 4, "cap_schedule": 4, "epsilon": 0 } } }"#,
    )
    .unwrap();
    let scene = dir.path().join("scene");
    let asset = dir.path().join("a.pgav");
    let run = |args: &[&std::ffi::OsStr]| {
        let out = pgav().arg("--config").arg(&config).args(args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let stdout = run(&[
        "--seed".as_ref(),
        "4".as_ref(),
        "demo".as_ref(),
        "--out".as_ref(),
        scene.as_os_str(),
    ]);
    assert!(stdout.contains("seed: 4"));
    run(&[
        "build".as_ref(),
        "--scene".as_ref(),
        scene.as_os_str(),
        "--out".as_ref(),
        asset.as_os_str(),
    ]);
    let bytes = std::fs::read(&asset).unwrap();
    assert_eq!((bytes.len() - 12 - 56 * 20) % 188, 0);
    let stats = run(&["stats".as_ref(), "--asset".as_ref(), asset.as_os_str()]);
    assert!(stats.contains("faces"), "{stats}");

    let metrics = dir.path().join("m.csv");
    run(&[
        "stream-sim".as_ref(),
        "--scene".as_ref(),
        scene.as_os_str(),
        "--asset".as_ref(),
        asset.as_os_str(),
        "--bandwidth".as_ref(),
        "400".as_ref(),
        "--metrics-out".as_ref(),
        metrics.as_os_str(),
    ]);
    let csv = std::fs::read_to_string(&metrics).unwrap();
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count() - 1;
    let records = (bytes.len() - 12 - 56 * 20) / 188;
    // 400 B/s at 100 ms ticks is 40 bytes per tick
    assert_eq!(rows, (records * 188).div_ceil(40) + 1);
}
