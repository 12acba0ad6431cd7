#pragma once

#include <filesystem>
#include <string>

#include "facepaint/backend.hpp"
#include "facepaint/container.hpp"

namespace facepaint {

// Section helpers: parameters are stored as "<section>/<block name>" tensors.
void put_params(Container& c, const std::string& section, const ParamStore& params);
// Fills `layout` (already shaped) from the container; shape mismatches throw.
void get_params(const Container& c, const std::string& section, ParamStore& layout);

void put_schedule(Container& c, const NoiseSchedule& schedule);
NoiseSchedule get_schedule(const Container& c);

void put_scalar(Container& c, const std::string& name, double value);
double get_scalar(const Container& c, const std::string& name);

// kind = "checkpoint": schedule, predictor config + parameters, seed.
Container checkpoint_container(const ToyBackend& backend);
ToyBackend backend_from_container(const Container& c);

void save_checkpoint(const ToyBackend& backend, const std::filesystem::path& path);
ToyBackend load_checkpoint(const std::filesystem::path& path);

void require_kind(const Container& c, const std::string& kind);

}  // namespace facepaint
