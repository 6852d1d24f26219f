use pyo3::prelude::*;

#[pyfunction]
fn ping() -> String {
    "pong".to_string()
}

#[pymodule]
fn efcn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ping, m)?)?;
    Ok(())
}
