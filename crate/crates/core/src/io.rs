//! Sequence directories on disk.
//!
//! ```text
//! sequence.toml            intrinsics, extrinsics, profile, scene
//! frames.csv               index,timestamp_s
//! intensity/frame_%06d.png 8-bit grey
//! depth/frame_%06d.png     16-bit, 5000 units per metre, 0 = invalid
//! imu.csv                  timestamp_s,gx,gy,gz,ax,ay,az
//! groundtruth.txt          TUM trajectory (optional)
//! states.csv               true velocity, biases, gravity (optional)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, Frame, Image};
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::imu::{ImuSample, NoiseProfile};
use crate::manifold::{make_transform, Quat, RigidTransform, State, Vec3};
use crate::synth::Sequence;

pub const DEPTH_SCALE: f64 = 5000.0;

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub translation: [f64; 3],
    /// x, y, z, w
    pub rotation: [f64; 4],
}

impl From<&RigidTransform> for PoseRecord {
    fn from(t: &RigidTransform) -> Self {
        let v = t.translation.vector;
        let q = t.rotation.coords;
        PoseRecord {
            translation: [v.x, v.y, v.z],
            rotation: [q.x, q.y, q.z, q.w],
        }
    }
}

impl PoseRecord {
    pub fn transform(&self) -> RigidTransform {
        let [x, y, z, w] = self.rotation;
        make_transform(
            Quat::from_quaternion(nalgebra::Quaternion::new(w, x, y, z)),
            Vec3::from(self.translation),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub name: String,
    /// Shipped scene the sequence was rendered from, if any.
    pub scene: Option<String>,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub profile: NoiseProfile,
    pub seed: u64,
    pub t_cs: PoseRecord,
    pub scene_from_world: Option<PoseRecord>,
}

impl SequenceMeta {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

/// A sequence loaded from disk.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub meta: SequenceMeta,
    pub frames: Vec<Frame>,
    pub imu: Vec<ImuSample>,
    pub ground_truth: Option<Trajectory>,
    pub true_states: Option<Vec<State>>,
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn encode_png(
    path: &Path,
    width: usize,
    height: usize,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(depth);
        let mut w = enc.write_header().map_err(|e| png_error(path, e))?;
        w.write_image_data(data).map_err(|e| png_error(path, e))?;
    }
    Ok(out)
}

pub fn write_intensity_png(path: &Path, img: &Image) -> Result<()> {
    let data: Vec<u8> = img
        .data
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    write_atomic(
        path,
        &encode_png(path, img.width, img.height, png::BitDepth::Eight, &data)?,
    )
}

pub fn write_depth_png(path: &Path, img: &Image) -> Result<()> {
    let mut data = Vec::with_capacity(img.data.len() * 2);
    for d in &img.data {
        let v = if *d > 0.0 {
            (d * DEPTH_SCALE).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        data.extend_from_slice(&v.to_be_bytes());
    }
    write_atomic(
        path,
        &encode_png(path, img.width, img.height, png::BitDepth::Sixteen, &data)?,
    )
}

fn read_png(path: &Path) -> Result<(usize, usize, png::BitDepth, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_error(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_error(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| png_error(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(png_error(
            path,
            format!("expected greyscale, found {:?}", info.color_type),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((
        info.width as usize,
        info.height as usize,
        info.bit_depth,
        buf,
    ))
}

pub fn read_intensity_png(path: &Path) -> Result<Image> {
    let (w, h, depth, buf) = read_png(path)?;
    if depth != png::BitDepth::Eight {
        return Err(png_error(
            path,
            format!("expected 8-bit intensity, found {depth:?}"),
        ));
    }
    Ok(Image {
        width: w,
        height: h,
        data: buf.iter().map(|&b| b as f64).collect(),
    })
}

pub fn read_depth_png(path: &Path) -> Result<Image> {
    let (w, h, depth, buf) = read_png(path)?;
    if depth != png::BitDepth::Sixteen {
        return Err(png_error(
            path,
            format!("expected 16-bit depth, found {depth:?}"),
        ));
    }
    Ok(Image {
        width: w,
        height: h,
        data: buf
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / DEPTH_SCALE)
            .collect(),
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(path, line, e.to_string())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRow {
    timestamp_s: f64,
    gx: f64,
    gy: f64,
    gz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRow {
    index: usize,
    timestamp_s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRow {
    timestamp_s: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    bgx: f64,
    bgy: f64,
    bgz: f64,
    bax: f64,
    bay: f64,
    baz: f64,
    qx_iw: f64,
    qy_iw: f64,
    qz_iw: f64,
    qw_iw: f64,
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let rows: Vec<ImuRow> = samples
        .iter()
        .map(|s| ImuRow {
            timestamp_s: s.timestamp,
            gx: s.gyro.x,
            gy: s.gyro.y,
            gz: s.gyro.z,
            ax: s.accel.x,
            ay: s.accel.y,
            az: s.accel.z,
        })
        .collect();
    write_csv(path, &rows)
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let rows: Vec<ImuRow> = read_csv(path)?;
    let out: Vec<ImuSample> = rows
        .into_iter()
        .map(|r| {
            ImuSample::new(
                r.timestamp_s,
                Vec3::new(r.gx, r.gy, r.gz),
                Vec3::new(r.ax, r.ay, r.az),
            )
        })
        .collect();
    if let Some(i) = out
        .windows(2)
        .position(|w| !(w[1].timestamp > w[0].timestamp))
    {
        // header is line 1
        return Err(Error::parse(path, i + 3, "IMU timestamps must increase"));
    }
    Ok(out)
}

/// Writes a generated sequence. `scene` names the shipped scene it came from.
pub fn write_sequence(dir: &Path, seq: &Sequence, scene: Option<&str>, seed: u64) -> Result<()> {
    create_dir(&dir.join("intensity"))?;
    create_dir(&dir.join("depth"))?;
    let k = seq.intrinsics;
    let meta = SequenceMeta {
        name: seq.name.clone(),
        scene: scene.map(str::to_string),
        width: k.width,
        height: k.height,
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        profile: seq.profile,
        seed,
        t_cs: (&seq.t_cs).into(),
        scene_from_world: Some((&seq.scene_from_world).into()),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join("sequence.toml"), text.as_bytes())?;
    let mut rows = Vec::with_capacity(seq.len());
    for (i, f) in seq.frames.iter().enumerate() {
        write_intensity_png(&dir.join("intensity").join(frame_name(i)), &f.intensity)?;
        write_depth_png(&dir.join("depth").join(frame_name(i)), &f.depth)?;
        rows.push(FrameRow {
            index: i,
            timestamp_s: f.timestamp,
        });
    }
    write_csv(&dir.join("frames.csv"), &rows)?;
    write_imu_csv(&dir.join("imu.csv"), &seq.imu)?;
    let truth = Trajectory::from_states(&seq.timestamps(), &seq.ground_truth)?;
    write_atomic(&dir.join("groundtruth.txt"), truth.to_tum().as_bytes())?;
    let states: Vec<StateRow> = seq
        .frames
        .iter()
        .zip(&seq.ground_truth)
        .map(|(f, s)| StateRow {
            timestamp_s: f.timestamp,
            vx: s.v_iis.x,
            vy: s.v_iis.y,
            vz: s.v_iis.z,
            bgx: s.bg.x,
            bgy: s.bg.y,
            bgz: s.bg.z,
            bax: s.ba.x,
            bay: s.ba.y,
            baz: s.ba.z,
            qx_iw: s.q_iw.coords.x,
            qy_iw: s.q_iw.coords.y,
            qz_iw: s.q_iw.coords.z,
            qw_iw: s.q_iw.coords.w,
        })
        .collect();
    write_csv(&dir.join("states.csv"), &states)
}

pub fn read_sequence_meta(dir: &Path) -> Result<SequenceMeta> {
    let path = dir.join("sequence.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn read_sequence(dir: &Path) -> Result<SequenceData> {
    let meta = read_sequence_meta(dir)?;
    let k = meta.intrinsics()?;
    let rows: Vec<FrameRow> = read_csv(&dir.join("frames.csv"))?;
    let mut frames = Vec::with_capacity(rows.len());
    for (n, r) in rows.iter().enumerate() {
        if r.index != n {
            return Err(Error::parse(
                dir.join("frames.csv"),
                n + 2,
                format!("expected index {n}, found {}", r.index),
            ));
        }
        let ip = dir.join("intensity").join(frame_name(n));
        let dp = dir.join("depth").join(frame_name(n));
        let intensity = read_intensity_png(&ip)?;
        let depth = read_depth_png(&dp)?;
        if intensity.width != k.width || intensity.height != k.height {
            return Err(png_error(&ip, format!("expected {}x{}", k.width, k.height)));
        }
        let f = Frame::new(r.timestamp_s, intensity, depth).map_err(|e| png_error(&dp, e))?;
        frames.push(f);
    }
    let imu = read_imu_csv(&dir.join("imu.csv"))?;
    let gt_path = dir.join("groundtruth.txt");
    let ground_truth = if gt_path.exists() {
        Some(Trajectory::read_tum(&gt_path)?)
    } else {
        None
    };
    let st_path = dir.join("states.csv");
    let true_states = match (&ground_truth, st_path.exists()) {
        (Some(gt), true) => {
            let rows: Vec<StateRow> = read_csv(&st_path)?;
            if rows.len() != gt.len() {
                return Err(Error::parse(
                    &st_path,
                    0,
                    format!("{} rows for {} poses", rows.len(), gt.len()),
                ));
            }
            Some(
                rows.iter()
                    .zip(&gt.poses)
                    .map(|(r, p)| State {
                        p_wc: p.translation.vector,
                        q_wc: p.rotation,
                        v_iis: Vec3::new(r.vx, r.vy, r.vz),
                        bg: Vec3::new(r.bgx, r.bgy, r.bgz),
                        ba: Vec3::new(r.bax, r.bay, r.baz),
                        q_iw: Quat::from_quaternion(nalgebra::Quaternion::new(
                            r.qw_iw, r.qx_iw, r.qy_iw, r.qz_iw,
                        )),
                    })
                    .collect(),
            )
        }
        _ => None,
    };
    Ok(SequenceData {
        meta,
        frames,
        imu,
        ground_truth,
        true_states,
    })
}

/// Buffered writer for text outputs that are renamed into place on finish.
pub struct AtomicText {
    path: PathBuf,
    tmp: PathBuf,
    out: BufWriter<File>,
}

impl AtomicText {
    pub fn create(path: &Path) -> Result<Self> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
        let tmp = dir.join(format!(".{name}.tmp"));
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(AtomicText {
            path: path.to_path_buf(),
            tmp,
            out: BufWriter::new(f),
        })
    }

    pub fn writer(&mut self) -> &mut impl Write {
        &mut self.out
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.tmp, e))?;
        std::fs::rename(&self.tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}
