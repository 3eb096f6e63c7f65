//! Python bindings: the geometry types, sensor simulation, metrics, the
//! gradient checker, and an end-to-end refinement demo on the synthetic
//! scene.
//!
//! ```python
//! import depthpose_py as dp
//!
//! cam = dp.Camera(70.0, 70.0, 31.5, 31.5, 64, 64)
//! pose = dp.Se3.from_tangent([0.0, 0.0, 0.1, 0.02, 0.0, 0.0])
//! pix, valid = cam.warp_pixel(pose, 2.0, (12.0, 40.0))
//!
//! assert dp.gradcheck(16, 16, 2, 0)
//! result = dp.refine_two_planes(frames=3, iters=300, noise_f=0.5,
//!                               sample_rate=0.07, seed=7)
//! ```

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use depthpose::dataio::{generate_synthetic, two_planes_preset};
use depthpose::diffcore::{
    joint_refine, run_gradcheck, AdamConfig, FdCheckOptions, InitOverrides, ObjectiveConfig,
    RefineOptions, SequenceInputs,
};
use depthpose::evaluation::{compute_ate, compute_re, nearest_neighbor_fill, Trajectory};
use depthpose::geometry::{
    backproject, exp_map, log_map, project, warp_pixel, CameraIntrinsics, Se3Tangent,
    Se3Transform,
};
use depthpose::imaging::{DepthMap, SparseDepth};
use depthpose::losses::LossWeights;
use depthpose::sensorsim::{corrupt_depth as corrupt_depth_rs, NoiseModel};
use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Rigid-body transform.
#[pyclass(name = "Se3", from_py_object)]
#[derive(Clone)]
struct PySe3 {
    inner: Se3Transform,
}

#[pymethods]
impl PySe3 {
    #[staticmethod]
    fn identity() -> Self {
        PySe3 {
            inner: Se3Transform::identity(),
        }
    }

    /// Exponential map of a 6-vector [rx, ry, rz, tx, ty, tz].
    #[staticmethod]
    fn from_tangent(tangent: [f64; 6]) -> Self {
        PySe3 {
            inner: exp_map(&Se3Tangent::from_slice(&tangent)),
        }
    }

    /// From translation and quaternion, TUM field order (tx ty tz qx qy qz qw).
    #[staticmethod]
    fn from_translation_quaternion(t: [f64; 3], q: [f64; 4]) -> Self {
        let uq = UnitQuaternion::new_normalize(Quaternion::new(q[3], q[0], q[1], q[2]));
        PySe3 {
            inner: Se3Transform {
                rotation: *uq.to_rotation_matrix().matrix(),
                translation: Vector3::new(t[0], t[1], t[2]),
            },
        }
    }

    /// Logarithm map; fails for rotations at pi.
    fn log(&self) -> PyResult<[f64; 6]> {
        Ok(log_map(&self.inner).map_err(err)?.to_array())
    }

    /// `self * other` (apply `other` first).
    fn compose(&self, other: &PySe3) -> Self {
        PySe3 {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> Self {
        PySe3 {
            inner: self.inner.inverse(),
        }
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.inner.transform_point(&Vector3::new(p[0], p[1], p[2]));
        [q.x, q.y, q.z]
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        let t = self.inner.translation;
        [t.x, t.y, t.z]
    }

    /// Rotation matrix as three rows.
    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        let r = self.inner.rotation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ]
    }

    fn rotation_angle(&self) -> f64 {
        self.inner.rotation_angle()
    }

    fn __repr__(&self) -> String {
        let t = self.inner.translation;
        format!(
            "Se3(angle={:.6} rad, t=[{:.6}, {:.6}, {:.6}])",
            self.inner.rotation_angle(),
            t.x,
            t.y,
            t.z
        )
    }
}

/// Pinhole camera intrinsics.
#[pyclass(name = "Camera", from_py_object)]
#[derive(Clone)]
struct PyCamera {
    inner: CameraIntrinsics,
}

#[pymethods]
impl PyCamera {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> PyResult<Self> {
        Ok(PyCamera {
            inner: CameraIntrinsics::new(fx, fy, cx, cy, width, height).map_err(err)?,
        })
    }

    /// Project a camera-frame point to pixel coordinates.
    fn project(&self, p: [f64; 3]) -> PyResult<(f64, f64)> {
        let pix = project(&self.inner, &Vector3::new(p[0], p[1], p[2])).map_err(err)?;
        Ok((pix.x, pix.y))
    }

    /// Back-project a pixel at a given depth to a camera-frame point.
    fn backproject(&self, u: (f64, f64), depth: f64) -> PyResult<[f64; 3]> {
        let p = backproject(&self.inner, &Vector2::new(u.0, u.1), depth).map_err(err)?;
        Ok([p.x, p.y, p.z])
    }

    /// Reproject a pixel through a relative pose; returns ((u, v), valid).
    fn warp_pixel(&self, t: &PySe3, depth: f64, u: (f64, f64)) -> ((f64, f64), bool) {
        let (pix, valid) = warp_pixel(&self.inner, &t.inner, depth, &Vector2::new(u.0, u.1));
        ((pix.x, pix.y), valid)
    }

    #[getter]
    fn size(&self) -> (usize, usize) {
        (self.inner.width, self.inner.height)
    }
}

/// Simulate a sparse, noisy sensor reading of a dense depth map
/// (row-major). Returns (values, valid) with invalid entries zeroed.
#[pyfunction]
fn corrupt_depth(
    depth: Vec<f64>,
    width: usize,
    height: usize,
    f: f64,
    sample_rate: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<bool>)> {
    let dense = DepthMap::new(width, height, depth).map_err(err)?;
    let model = NoiseModel::new(f, sample_rate, seed).map_err(err)?;
    let sparse = corrupt_depth_rs(&dense, &model);
    let values = sparse
        .data()
        .iter()
        .zip(sparse.valid())
        .map(|(d, v)| if *v { *d } else { 0.0 })
        .collect();
    Ok((values, sparse.valid().to_vec()))
}

/// Depth-completion metrics against ground truth restricted to `gt_valid`.
/// Returns {rmse_mm, mae_mm, irmse_1perkm, imae_1perkm}.
#[pyfunction]
fn depth_metrics(
    py: Python<'_>,
    pred: Vec<f64>,
    gt: Vec<f64>,
    gt_valid: Vec<bool>,
    width: usize,
    height: usize,
) -> PyResult<Py<PyDict>> {
    let pred = DepthMap::new(width, height, pred).map_err(err)?;
    let gt = SparseDepth::new(width, height, gt, gt_valid).map_err(err)?;
    let m = depthpose::evaluation::depth_metrics(&pred, &gt).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("rmse_mm", m.rmse_mm)?;
    out.set_item("mae_mm", m.mae_mm)?;
    out.set_item("irmse_1perkm", m.irmse_1perkm)?;
    out.set_item("imae_1perkm", m.imae_1perkm)?;
    Ok(out.into())
}

fn rows_to_trajectory(rows: Vec<[f64; 8]>) -> PyResult<Trajectory> {
    let entries = rows
        .into_iter()
        .map(|r| {
            let q = UnitQuaternion::new_normalize(Quaternion::new(r[7], r[4], r[5], r[6]));
            (
                r[0],
                Se3Transform {
                    rotation: *q.to_rotation_matrix().matrix(),
                    translation: Vector3::new(r[1], r[2], r[3]),
                },
            )
        })
        .collect();
    Trajectory::new(entries).map_err(err)
}

/// ATE and RE between trajectories given as rows of
/// [timestamp, tx, ty, tz, qx, qy, qz, qw]. Returns
/// {ate_mean, ate_std, re_mean, re_std}.
#[pyfunction]
#[pyo3(signature = (est, gt, max_offset=0.02))]
fn trajectory_metrics(
    py: Python<'_>,
    est: Vec<[f64; 8]>,
    gt: Vec<[f64; 8]>,
    max_offset: f64,
) -> PyResult<Py<PyDict>> {
    let est = rows_to_trajectory(est)?;
    let gt = rows_to_trajectory(gt)?;
    let (ate_mean, ate_std) = compute_ate(&est, &gt, max_offset).map_err(err)?;
    let (re_mean, re_std) = compute_re(&est, &gt, max_offset).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("ate_mean", ate_mean)?;
    out.set_item("ate_std", ate_std)?;
    out.set_item("re_mean", re_mean)?;
    out.set_item("re_std", re_std)?;
    Ok(out.into())
}

/// Verify every analytic gradient against central finite differences on a
/// seeded instance; True iff all blocks pass at rel_tol 1e-4.
#[pyfunction]
#[pyo3(signature = (width=16, height=16, levels=2, seed=0))]
fn gradcheck(width: usize, height: usize, levels: usize, seed: u64) -> PyResult<bool> {
    let outcome = run_gradcheck(width, height, levels, seed, false, &FdCheckOptions::default())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(outcome.passed)
}

/// Same as [`gradcheck`], returning the per-block report text.
#[pyfunction]
#[pyo3(signature = (width=16, height=16, levels=2, seed=0))]
fn gradcheck_report(width: usize, height: usize, levels: usize, seed: u64) -> PyResult<String> {
    let outcome = run_gradcheck(width, height, levels, seed, false, &FdCheckOptions::default())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(outcome.render())
}

/// End-to-end demo: render the two-plane scene, corrupt the depth with the
/// proportional-noise sensor model, refine depth with the true pose held,
/// and report RMSEs against ground truth. Returns a dict with
/// measurement/baseline/refined RMSE (meters) and the loss history ends.
#[pyfunction]
#[pyo3(signature = (frames=3, iters=400, noise_f=0.5, sample_rate=0.07, seed=7))]
fn refine_two_planes(
    py: Python<'_>,
    frames: usize,
    iters: usize,
    noise_f: f64,
    sample_rate: f64,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let dataset = generate_synthetic(&two_planes_preset(frames)).map_err(err)?;
    let noisy: Vec<SparseDepth> = dataset
        .frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            Ok(corrupt_depth_rs(
                f.gt_depth.as_ref().unwrap(),
                &NoiseModel::new(noise_f, sample_rate, seed.wrapping_add(k as u64))
                    .map_err(err)?,
            ))
        })
        .collect::<PyResult<_>>()?;
    let true_tangents: Vec<Se3Tangent> = (0..frames - 1)
        .map(|k| {
            log_map(
                &dataset.frames[k + 1]
                    .gt_pose
                    .unwrap()
                    .inverse()
                    .compose(&dataset.frames[k].gt_pose.unwrap()),
            )
            .map_err(err)
        })
        .collect::<PyResult<_>>()?;

    let dense_rmse = |pred: &DepthMap, gt: &DepthMap| -> f64 {
        let mse: f64 = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / pred.data().len() as f64;
        mse.sqrt()
    };

    let mut se = 0.0;
    let mut n = 0usize;
    let mut baseline_acc = 0.0;
    for (f, sp) in dataset.frames.iter().zip(&noisy) {
        let gt = f.gt_depth.as_ref().unwrap();
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                if let Some(d) = sp.at(x, y) {
                    let e = d - gt.at(x, y);
                    se += e * e;
                    n += 1;
                }
            }
        }
        let filled = nearest_neighbor_fill(sp).map_err(err)?;
        baseline_acc += dense_rmse(&filled, gt).powi(2);
    }
    let measurement_rmse = (se / n.max(1) as f64).sqrt();
    let baseline_rmse = (baseline_acc / frames as f64).sqrt();

    let inputs = SequenceInputs {
        images: dataset.frames.iter().map(|f| f.image.clone()).collect(),
        sparse: noisy.clone(),
        supervision: noisy,
        intrinsics: dataset.intrinsics,
    };
    let opts = RefineOptions {
        objective: ObjectiveConfig {
            weights: LossWeights::new(0.2, 0.4, 3.0, 0.0).map_err(err)?,
            levels: 4,
            optimize_pose: false,
            optimize_masks: false,
            ..ObjectiveConfig::default()
        },
        adam: AdamConfig {
            lr: 4e-3,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        iters,
        seed,
        init: InitOverrides {
            init_depth: Some(2.0),
            tangents: Some(true_tangents),
            mask_logit: Some(9.0),
            ..InitOverrides::default()
        },
    };
    let result = joint_refine(inputs, &opts).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let mut refined_acc = 0.0;
    for (k, depth) in result.depths.iter().enumerate() {
        refined_acc += dense_rmse(depth, dataset.frames[k].gt_depth.as_ref().unwrap()).powi(2);
    }
    let refined_rmse = (refined_acc / result.depths.len() as f64).sqrt();

    let out = PyDict::new(py);
    out.set_item("measurement_rmse_m", measurement_rmse)?;
    out.set_item("baseline_rmse_m", baseline_rmse)?;
    out.set_item("refined_rmse_m", refined_rmse)?;
    out.set_item("initial_total_loss", result.history[0].total)?;
    out.set_item("final_total_loss", result.history.last().unwrap().total)?;
    out.set_item("iterations", iters)?;
    Ok(out.into())
}

/// The derivation helpers exposed for quick experiments: rotation helpers
/// mirror the library's conventions exactly.
#[pyfunction]
fn relative_transform(t_w_prev: &PySe3, t_w_curr: &PySe3) -> PySe3 {
    PySe3 {
        inner: depthpose::geometry::relative_transform(&t_w_prev.inner, &t_w_curr.inner),
    }
}

#[pyfunction]
fn rotation_to_quaternion(r: [[f64; 3]; 3]) -> [f64; 4] {
    let m = nalgebra::Matrix3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    );
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    [q.i, q.j, q.k, q.w]
}

#[pymodule]
fn depthpose_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySe3>()?;
    m.add_class::<PyCamera>()?;
    m.add_function(wrap_pyfunction!(corrupt_depth, m)?)?;
    m.add_function(wrap_pyfunction!(depth_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_report, m)?)?;
    m.add_function(wrap_pyfunction!(refine_two_planes, m)?)?;
    m.add_function(wrap_pyfunction!(relative_transform, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_to_quaternion, m)?)?;
    Ok(())
}
