#include "gridcascade/simengine.hpp"

namespace gridcascade {

CaseConfig iberian_case_config() {
    CaseConfig cfg;
    cfg.avr_mode = AvrMode::deadband;
    cfg.gen_ramp_mvar_s = 30.0;
    cfg.gen_droop_kq = 0.01;
    cfg.gen_damping = 20.0;
    cfg.external_h = 100.0;
    cfg.mesh_x_scale = 2.0;
    cfg.mesh_b_scale = 0.5;
    cfg.collector_reactor_mvar = {150.0, 150.0, 150.0, 170.0, 190.0};
    return cfg;
}

BuiltinScenario builtin_iberian_scenario(const CaseConfig& cfg) {
    BuiltinScenario s;
    s.grid = build_case39(cfg);

    std::vector<int> mesh;
    for (const auto& b : s.grid.branches) {
        if (b.mesh_candidate) mesh.push_back(b.id);
    }
    std::vector<int> operator_reactors;
    for (const auto& r : s.grid.reactors) {
        if (r.connected && s.grid.bus(r.bus).kind == BusKind::transmission) operator_reactors.push_back(r.id);
    }
    if (mesh.size() != 4 || operator_reactors.size() != 2) {
        throw CaseError("case lacks the corridors or reactors the timeline needs");
    }

    s.events = {
        {4.5, MeshLine{mesh[0]}},
        {5.2, MeshLine{mesh[1]}},
        {5.9, MeshLine{mesh[2]}},
        {6.6, MeshLine{mesh[3]}},
        {7.3, ScaleExport{0.98}},
        {9.6, OpenReactor{operator_reactors[0]}},
        {9.6, OpenReactor{operator_reactors[1]}},
        {9.8, SetHvdcMode{1, HvdcMode::pmode1, cfg.hvdc_export_mw}},
    };
    s.config.t_end = 20.0;
    return s;
}

}  // namespace gridcascade
