use pyo3::prelude::*;

#[pymodule]
fn idstyle_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
