//! On-disk trajectory and codebook formats.
//!
//! Binary trajectory files are little-endian:
//!
//! ```text
//! header:  "CTRJ" | version u16 | L u16 | D u16 | count u64 | width u32 | height u32 | frames u32
//! record:  id u64 | start_frame u32 | L x (x f32, y f32) | D x f32
//! ```
//!
//! The text variant has a `CTRJ-TEXT <version> <L> <D> <count> <width> <height> <frames>`
//! header line followed by one whitespace-separated record per line with the
//! same fields in the same order.

use std::io::{BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Codebook, Trajectory, TrajectorySet, VideoInfo};
use crate::error::{Error, Result};

const TRAJ_MAGIC: &[u8; 4] = b"CTRJ";
const TRAJ_TEXT_MAGIC: &str = "CTRJ-TEXT";
const TRAJ_VERSION: u16 = 1;
const CODEBOOK_MAGIC: &[u8; 4] = b"CTCB";
const CODEBOOK_VERSION: u16 = 1;

fn check_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::format(format!("{what} {v} does not fit in u16")))
}

pub fn write_trajectories<W: Write>(mut w: W, set: &TrajectorySet) -> Result<()> {
    set.validate()?;
    w.write_all(TRAJ_MAGIC)?;
    w.write_u16::<LittleEndian>(TRAJ_VERSION)?;
    w.write_u16::<LittleEndian>(check_u16(set.track_len, "track length")?)?;
    w.write_u16::<LittleEndian>(check_u16(set.dim, "descriptor dimension")?)?;
    w.write_u64::<LittleEndian>(set.trajectories.len() as u64)?;
    w.write_u32::<LittleEndian>(set.video.width)?;
    w.write_u32::<LittleEndian>(set.video.height)?;
    w.write_u32::<LittleEndian>(set.video.frames)?;
    for t in &set.trajectories {
        w.write_u64::<LittleEndian>(t.id)?;
        w.write_u32::<LittleEndian>(t.start_frame)?;
        for [x, y] in &t.points {
            w.write_f32::<LittleEndian>(*x)?;
            w.write_f32::<LittleEndian>(*y)?;
        }
        for v in &t.descriptor {
            w.write_f32::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

pub fn read_trajectories<R: Read>(mut r: R) -> Result<TrajectorySet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRAJ_MAGIC {
        return Err(Error::format("not a CTRJ trajectory file"));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != TRAJ_VERSION {
        return Err(Error::format(format!(
            "unsupported trajectory file version {version}"
        )));
    }
    let track_len = usize::from(r.read_u16::<LittleEndian>()?);
    let dim = usize::from(r.read_u16::<LittleEndian>()?);
    let count = r.read_u64::<LittleEndian>()?;
    let video = VideoInfo {
        width: r.read_u32::<LittleEndian>()?,
        height: r.read_u32::<LittleEndian>()?,
        frames: r.read_u32::<LittleEndian>()?,
    };
    let mut set = TrajectorySet::new(track_len, dim, video);
    for _ in 0..count {
        let id = r.read_u64::<LittleEndian>()?;
        let start_frame = r.read_u32::<LittleEndian>()?;
        let mut points = Vec::with_capacity(track_len);
        for _ in 0..track_len {
            let x = r.read_f32::<LittleEndian>()?;
            let y = r.read_f32::<LittleEndian>()?;
            points.push([x, y]);
        }
        let mut descriptor = vec![0.0; dim];
        r.read_f32_into::<LittleEndian>(&mut descriptor)?;
        let t = Trajectory {
            id,
            start_frame,
            points,
            descriptor,
        };
        t.validate(track_len, dim)?;
        set.trajectories.push(t);
    }
    Ok(set)
}

pub fn write_trajectories_text<W: Write>(mut w: W, set: &TrajectorySet) -> Result<()> {
    set.validate()?;
    writeln!(
        w,
        "{TRAJ_TEXT_MAGIC} {TRAJ_VERSION} {} {} {} {} {} {}",
        set.track_len,
        set.dim,
        set.trajectories.len(),
        set.video.width,
        set.video.height,
        set.video.frames
    )?;
    for t in &set.trajectories {
        write!(w, "{} {}", t.id, t.start_frame)?;
        for [x, y] in &t.points {
            write!(w, " {x} {y}")?;
        }
        for v in &t.descriptor {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.ok_or_else(|| Error::format(format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::format(format!("bad {what}")))
}

pub fn read_trajectories_text<R: BufRead>(r: R) -> Result<TrajectorySet> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty trajectory text file"))??;
    let mut tok = header.split_whitespace();
    if tok.next() != Some(TRAJ_TEXT_MAGIC) {
        return Err(Error::format("not a CTRJ-TEXT trajectory file"));
    }
    let version: u16 = parse(tok.next(), "version")?;
    if version != TRAJ_VERSION {
        return Err(Error::format(format!(
            "unsupported trajectory file version {version}"
        )));
    }
    let track_len: usize = parse(tok.next(), "track length")?;
    let dim: usize = parse(tok.next(), "descriptor dimension")?;
    let count: usize = parse(tok.next(), "count")?;
    let video = VideoInfo {
        width: parse(tok.next(), "width")?,
        height: parse(tok.next(), "height")?,
        frames: parse(tok.next(), "frames")?,
    };
    let mut set = TrajectorySet::new(track_len, dim, video);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let id = parse(tok.next(), "id")?;
        let start_frame = parse(tok.next(), "start frame")?;
        let points = (0..track_len)
            .map(|_| Ok([parse(tok.next(), "x")?, parse(tok.next(), "y")?]))
            .collect::<Result<Vec<_>>>()?;
        let descriptor = (0..dim)
            .map(|_| parse(tok.next(), "descriptor entry"))
            .collect::<Result<Vec<f32>>>()?;
        if tok.next().is_some() {
            return Err(Error::format(format!("trailing fields in record {id}")));
        }
        let t = Trajectory {
            id,
            start_frame,
            points,
            descriptor,
        };
        t.validate(track_len, dim)?;
        set.trajectories.push(t);
    }
    if set.trajectories.len() != count {
        return Err(Error::format(format!(
            "header declares {count} records, found {}",
            set.trajectories.len()
        )));
    }
    Ok(set)
}

/// Codebook file: `"CTCB" | version u16 | K u32 | D u32 | seed u64 | config hash u64 | K x D f32`.
pub fn write_codebook<W: Write>(mut w: W, codebook: &Codebook, config_hash: u64) -> Result<()> {
    w.write_all(CODEBOOK_MAGIC)?;
    w.write_u16::<LittleEndian>(CODEBOOK_VERSION)?;
    w.write_u32::<LittleEndian>(codebook.k() as u32)?;
    w.write_u32::<LittleEndian>(codebook.dim() as u32)?;
    w.write_u64::<LittleEndian>(codebook.seed)?;
    w.write_u64::<LittleEndian>(config_hash)?;
    for c in &codebook.centroids {
        for v in c {
            w.write_f32::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

/// Returns the codebook and the config hash it was built under.
pub fn read_codebook<R: Read>(mut r: R) -> Result<(Codebook, u64)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CODEBOOK_MAGIC {
        return Err(Error::format("not a CTCB codebook file"));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != CODEBOOK_VERSION {
        return Err(Error::format(format!(
            "unsupported codebook version {version}"
        )));
    }
    let k = r.read_u32::<LittleEndian>()? as usize;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let seed = r.read_u64::<LittleEndian>()?;
    let hash = r.read_u64::<LittleEndian>()?;
    let mut centroids = Vec::with_capacity(k);
    for _ in 0..k {
        let mut c = vec![0.0f32; dim];
        r.read_f32_into::<LittleEndian>(&mut c)?;
        centroids.push(c);
    }
    Ok((Codebook { centroids, seed }, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_set() -> impl Strategy<Value = TrajectorySet> {
        (2usize..6, 1usize..5).prop_flat_map(|(l, d)| {
            let traj = (
                any::<u64>(),
                0u32..1000,
                prop::collection::vec([0.0f32..500.0, 0.0f32..500.0], l),
                prop::collection::vec(-10.0f32..10.0, d),
            )
                .prop_map(|(id, start_frame, points, descriptor)| Trajectory {
                    id,
                    start_frame,
                    points,
                    descriptor,
                });
            prop::collection::vec(traj, 0..6).prop_map(move |trajectories| TrajectorySet {
                track_len: l,
                dim: d,
                video: VideoInfo {
                    width: 640,
                    height: 480,
                    frames: 1200,
                },
                trajectories,
            })
        })
    }

    proptest! {
        #[test]
        fn binary_and_text_round_trip(set in arb_set()) {
            let mut bin = Vec::new();
            write_trajectories(&mut bin, &set).unwrap();
            prop_assert_eq!(&read_trajectories(bin.as_slice()).unwrap(), &set);
            let mut txt = Vec::new();
            write_trajectories_text(&mut txt, &set).unwrap();
            prop_assert_eq!(&read_trajectories_text(txt.as_slice()).unwrap(), &set);
        }
    }

    #[test]
    fn binary_layout_is_fixed() {
        let set = TrajectorySet {
            track_len: 2,
            dim: 1,
            video: VideoInfo {
                width: 3,
                height: 4,
                frames: 5,
            },
            trajectories: vec![Trajectory {
                id: 7,
                start_frame: 2,
                points: vec![[1.0, 2.0], [3.0, 4.0]],
                descriptor: vec![0.5],
            }],
        };
        let mut bin = Vec::new();
        write_trajectories(&mut bin, &set).unwrap();
        // header 4+2+2+2+8+12 = 30, record 8+4+16+4 = 32
        assert_eq!(bin.len(), 62);
        assert_eq!(&bin[..4], b"CTRJ");
        assert_eq!(&bin[4..6], &1u16.to_le_bytes());
        assert_eq!(&bin[30..38], &7u64.to_le_bytes());
        assert_eq!(&bin[58..62], &0.5f32.to_le_bytes());
    }

    #[test]
    fn rejects_negative_coordinates() {
        let set = TrajectorySet {
            track_len: 2,
            dim: 0,
            video: VideoInfo {
                width: 3,
                height: 4,
                frames: 5,
            },
            trajectories: vec![Trajectory {
                id: 1,
                start_frame: 0,
                points: vec![[1.0, -2.0], [3.0, 4.0]],
                descriptor: vec![],
            }],
        };
        assert!(write_trajectories(Vec::new(), &set).is_err());
    }

    #[test]
    fn codebook_round_trip() {
        let cb = Codebook {
            centroids: vec![vec![1.0, 2.5], vec![-3.0, 0.125]],
            seed: 42,
        };
        let mut buf = Vec::new();
        write_codebook(&mut buf, &cb, 0xdead_beef).unwrap();
        let (back, hash) = read_codebook(buf.as_slice()).unwrap();
        assert_eq!(back, cb);
        assert_eq!(hash, 0xdead_beef);
    }
}
