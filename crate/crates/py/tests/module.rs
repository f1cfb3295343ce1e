use pyo3::prelude::*;
use pyo3::types::PyModule;

fn with_module<R>(f: impl FnOnce(&Bound<'_, PyModule>) -> PyResult<R>) -> R {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "pydipnet").unwrap();
        pydipnet::pydipnet(&m).unwrap();
        f(&m).unwrap()
    })
}

#[test]
fn metrics_and_noise_round_trip() {
    with_module(|m| {
        let clean = vec![0.5f32; 3 * 16 * 16];
        let noisy: Vec<f32> = m.getattr("add_noise")?.call1((clean.clone(), 16, 16, 3, 25.0, 7))?.extract()?;
        assert_eq!(noisy.len(), clean.len());
        let again: Vec<f32> = m.getattr("add_noise")?.call1((clean.clone(), 16, 16, 3, 25.0, 7))?.extract()?;
        assert_eq!(noisy, again);
        let p: f64 = m.getattr("psnr")?.call1((clean.clone(), noisy.clone(), 16, 16, 3))?.extract()?;
        assert!((p - 20.17).abs() < 0.5, "{p}");
        let s: f64 = m.getattr("ssim")?.call1((clean.clone(), clean, 16, 16, 3))?.extract()?;
        assert!((s - 1.0).abs() < 1e-9);
        let lr: f64 = m.getattr("cosine_lr")?.call1((0, 10, 1e-3))?.extract()?;
        assert_eq!(lr, 1e-3);
        let h: (f64, f64) = m.getattr("h_divergence")?.call1((vec![0.0, 0.0],))?.extract()?;
        assert_eq!(h, (2.0, 2.0));
        Ok(())
    })
}

#[test]
fn errors_map_to_python_exceptions() {
    with_module(|m| {
        let py = m.py();
        let err = m.getattr("RunConfig")?.call1(("lamda1 = 0.1",)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
        let err = m.getattr("psnr")?.call1((vec![0.0f32; 5], vec![0.0f32; 5], 2, 2, 1)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyRuntimeError>(py) || err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
        Ok(())
    })
}

#[test]
fn trainer_steps_saves_and_denoises() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    with_module(|m| {
        let cfg = m.getattr("RunConfig")?.call1(("preset = micro\nmax_steps = 3\neval_every = 3\n",))?;
        cfg.call_method1("set", ("mode", "BP"))?;
        assert!(cfg.call_method0("to_text")?.extract::<String>()?.contains("mode = BP"));
        let t = m.getattr("Trainer")?.call1((cfg,))?;
        let losses = t.call_method0("train_step")?;
        assert!(losses.get_item("disc")?.extract::<Option<f64>>()?.is_some());
        t.call_method0("run")?;
        assert_eq!(t.getattr("step")?.extract::<u64>()?, 3);
        assert!(!t.call_method0("metrics")?.extract::<Vec<String>>()?.is_empty());
        t.call_method1("save", (path.clone(),))?;
        let d = m.getattr("Denoiser")?.call_method1("load", (path.clone(),))?;
        let out: Vec<f32> = d.call_method1("denoise", (vec![0.3f32; 3 * 9 * 11], 9, 11, 3))?.extract()?;
        assert_eq!(out.len(), 3 * 9 * 11);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        Ok(())
    })
}

#[test]
fn gradcheck_primitives_pass() {
    with_module(|m| {
        let rows: Vec<(String, u64, f64, bool)> = m.getattr("gradcheck")?.call1(("primitives", vec![1u64]))?.extract()?;
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.3), "{rows:?}");
        Ok(())
    })
}
