#[no_mangle]
pub extern "C" fn bdp_placeholder() -> u32 { bdproc::placeholder() }
