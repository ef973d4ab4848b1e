//! The binary trajectory format is the contract with external extractors;
//! these tests build files byte by byte instead of through the writer.

use std::process::Command;

use comptraj::trajkit::{
    read_trajectories, read_trajectories_text, write_trajectories, write_trajectories_text, Trajectory, TrajectorySet,
    VideoInfo,
};
use comptraj::Error;

fn header(l: u16, d: u16, count: u64, video: [u32; 3]) -> Vec<u8> {
    let mut b = b"CTRJ".to_vec();
    b.extend(1u16.to_le_bytes());
    b.extend(l.to_le_bytes());
    b.extend(d.to_le_bytes());
    b.extend(count.to_le_bytes());
    for v in video {
        b.extend(v.to_le_bytes());
    }
    b
}

fn record(id: u64, start: u32, points: &[[f32; 2]], desc: &[f32]) -> Vec<u8> {
    let mut b = id.to_le_bytes().to_vec();
    b.extend(start.to_le_bytes());
    for [x, y] in points {
        b.extend(x.to_le_bytes());
        b.extend(y.to_le_bytes());
    }
    for v in desc {
        b.extend(v.to_le_bytes());
    }
    b
}

fn sample() -> (Vec<u8>, TrajectorySet) {
    let video = VideoInfo {
        width: 64,
        height: 48,
        frames: 10,
    };
    let trajs = vec![
        Trajectory {
            id: 7,
            start_frame: 2,
            points: vec![[1.5, 2.0], [2.5, 2.25], [3.0, 2.5]],
            descriptor: vec![0.25, -1.0],
        },
        Trajectory {
            id: 9,
            start_frame: 0,
            points: vec![[60.0, 40.0], [61.0, 41.0], [62.0, 47.5]],
            descriptor: vec![0.0, 3.5],
        },
    ];
    let mut bytes = header(3, 2, 2, [64, 48, 10]);
    for t in &trajs {
        bytes.extend(record(t.id, t.start_frame, &t.points, &t.descriptor));
    }
    let mut set = TrajectorySet::new(3, 2, video);
    set.trajectories = trajs;
    (bytes, set)
}

#[test]
fn hand_built_file_reads_and_writer_matches_bytes() {
    let (bytes, set) = sample();
    assert_eq!(read_trajectories(bytes.as_slice()).unwrap(), set);
    let mut out = Vec::new();
    write_trajectories(&mut out, &set).unwrap();
    assert_eq!(out, bytes);
}

#[test]
fn text_and_binary_agree() {
    let (bytes, set) = sample();
    let mut text = Vec::new();
    write_trajectories_text(&mut text, &set).unwrap();
    assert!(text.starts_with(b"CTRJ-TEXT 1 3 2 2 64 48 10\n"));
    let back = read_trajectories_text(text.as_slice()).unwrap();
    assert_eq!(back, read_trajectories(bytes.as_slice()).unwrap());
}

#[test]
fn empty_file_and_zero_records() {
    let bytes = header(15, 30, 0, [320, 240, 48]);
    let set = read_trajectories(bytes.as_slice()).unwrap();
    assert!(set.trajectories.is_empty());
    assert_eq!((set.track_len, set.dim), (15, 30));
    assert!(matches!(read_trajectories(&[][..]), Err(Error::Io(_))));
}

#[test]
fn malformed_files_are_rejected() {
    let (bytes, _) = sample();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_trajectories(bad.as_slice()), Err(Error::Format(_))));

    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(read_trajectories(bad.as_slice()), Err(Error::Format(_))));

    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(read_trajectories(truncated), Err(Error::Io(_))));

    // Tracks need at least two points.
    let mut bytes = header(1, 1, 1, [10, 10, 5]);
    bytes.extend(record(1, 0, &[[1.0, 2.0]], &[0.0]));
    assert!(matches!(read_trajectories(bytes.as_slice()), Err(Error::Format(_))));

    // Coordinates must be finite and non-negative.
    for bad in [[-0.5, 1.0], [f32::NAN, 1.0], [1.0, f32::INFINITY]] {
        let mut bytes = header(2, 1, 1, [10, 10, 5]);
        bytes.extend(record(1, 0, &[[1.0, 1.0], bad], &[0.0]));
        assert!(matches!(read_trajectories(bytes.as_slice()), Err(Error::Format(_))), "{bad:?}");
    }
    let mut bytes = header(2, 1, 1, [10, 10, 5]);
    bytes.extend(record(1, 0, &[[1.0, 1.0]; 2], &[f32::NAN]));
    assert!(matches!(read_trajectories(bytes.as_slice()), Err(Error::Format(_))));
}

/// Extractors outside Rust write the same layout with `struct`.
#[test]
fn python_struct_writer_interoperates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("py.ctrj");
    let script = r#"
import struct, sys
L, D = 2, 3
recs = [(5, 1, [(0.5, 1.0), (1.5, 1.0)], [0.1, 0.2, 0.3]),
        (6, 0, [(9.0, 9.0), (8.0, 7.0)], [1.0, -1.0, 0.0])]
with open(sys.argv[1], "wb") as f:
    f.write(b"CTRJ" + struct.pack("<HHHQIII", 1, L, D, len(recs), 16, 12, 4))
    for i, s, pts, d in recs:
        f.write(struct.pack("<QI", i, s))
        for x, y in pts:
            f.write(struct.pack("<ff", x, y))
        f.write(struct.pack("<%df" % D, *d))
"#;
    let Ok(status) = Command::new("python3").arg("-c").arg(script).arg(&path).status() else {
        eprintln!("python3 not available; skipped");
        return;
    };
    assert!(status.success());
    let set = read_trajectories(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!((set.track_len, set.dim), (2, 3));
    assert_eq!(set.video, VideoInfo { width: 16, height: 12, frames: 4 });
    assert_eq!(set.trajectories[1].points, vec![[9.0, 9.0], [8.0, 7.0]]);
    assert_eq!(set.trajectories[0].descriptor, vec![0.1f32, 0.2, 0.3]);
}
