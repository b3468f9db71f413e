#include "rcbm/tensorcore/memory_meter.hpp"

#include <algorithm>
#include <utility>

#include "rcbm/tensorcore/error.hpp"

namespace rcbm {

namespace {
thread_local std::shared_ptr<MemoryMeter::State> g_active_meter;
}

const std::shared_ptr<MemoryMeter::State>& MemoryMeter::active() { return g_active_meter; }

MemoryMeter::MemoryMeter() : state_(std::make_shared<State>()) {}

void MemoryMeter::State::on_alloc(std::size_t bytes) {
  current += bytes;
  peak = std::max(peak, current);
  for (auto& scope : scopes) scope.peak_bytes = std::max(scope.peak_bytes, current);
}

std::size_t MemoryMeter::begin_scope(std::string label) {
  const std::size_t id = state_->next_scope_id++;
  state_->scopes.push_back({id, std::move(label), state_->current, state_->current});
  return id;
}

std::size_t MemoryMeter::end_scope(std::size_t id) {
  auto& scopes = state_->scopes;
  if (scopes.empty()) throw TapeError("meter scope closed with no open scope");
  if (scopes.back().id != id) {
    throw TapeError("meter scope '" + scopes.back().label +
                    "' must close before an outer scope");
  }
  const State::Scope scope = scopes.back();
  scopes.pop_back();
  return scope.peak_bytes - scope.entry_bytes;
}

MeterInstall::MeterInstall(MemoryMeter& meter) : previous_(g_active_meter) {
  g_active_meter = meter.state_;
}

MeterInstall::~MeterInstall() { g_active_meter = std::move(previous_); }

MeterScope::MeterScope(MemoryMeter& meter, std::string label)
    : meter_(&meter), id_(meter.begin_scope(std::move(label))) {}

MeterScope::~MeterScope() {
  if (open_) {
    try {
      meter_->end_scope(id_);
    } catch (...) {
    }
  }
}

std::size_t MeterScope::close() {
  open_ = false;
  return meter_->end_scope(id_);
}

Buffer::Buffer(std::size_t count, double fill)
    : data_(count, fill), meter_(MemoryMeter::active()) {
  if (meter_) meter_->on_alloc(bytes());
}

Buffer::~Buffer() { release(); }

Buffer::Buffer(Buffer&& other) noexcept
    : data_(std::move(other.data_)), meter_(std::move(other.meter_)) {
  other.data_.clear();
  other.meter_.reset();
}

Buffer& Buffer::operator=(Buffer&& other) noexcept {
  if (this != &other) {
    release();
    data_ = std::move(other.data_);
    other.data_.clear();
    meter_ = std::move(other.meter_);
    other.meter_.reset();
  }
  return *this;
}

Buffer Buffer::clone() const {
  Buffer copy(size());
  std::copy(data_.begin(), data_.end(), copy.data_.begin());
  return copy;
}

void Buffer::release() {
  if (meter_) meter_->on_free(bytes());
  meter_.reset();
  data_.clear();
  data_.shrink_to_fit();
}

}  // namespace rcbm
