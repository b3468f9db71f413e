#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace rcbm {

// Byte-exact accounting of live tensor buffers (values and gradients).
// Tape bookkeeping, optimizer state and scratch space are not counted.
//
// A meter becomes active for the current thread through MeterInstall; every
// Buffer allocated while it is active reports to it for its whole lifetime.
class MemoryMeter {
 public:
  MemoryMeter();

  std::size_t current_live_bytes() const { return state_->current; }
  std::size_t peak_live_bytes() const { return state_->peak; }

  /// Opens a measurement scope and returns its id.
  std::size_t begin_scope(std::string label);
  /// Closes the innermost scope. Throws TapeError if `id` is not innermost.
  /// Returns the peak live bytes above the scope-entry level.
  std::size_t end_scope(std::size_t id);

  std::size_t open_scopes() const { return state_->scopes.size(); }

  // Shared with every buffer allocated under this meter, so a buffer that
  // outlives the meter object still releases its bytes safely.
  struct State {
    struct Scope {
      std::size_t id;
      std::string label;
      std::size_t entry_bytes;
      std::size_t peak_bytes;
    };
    std::size_t current = 0;
    std::size_t peak = 0;
    std::size_t next_scope_id = 0;
    std::vector<Scope> scopes;

    void on_alloc(std::size_t bytes);
    void on_free(std::size_t bytes) { current -= bytes; }
  };

  /// State of the meter active on this thread, or nullptr.
  static const std::shared_ptr<State>& active();

 private:
  friend class MeterInstall;
  std::shared_ptr<State> state_;
};

/// Activates a meter on the current thread for the lifetime of this object.
class MeterInstall {
 public:
  explicit MeterInstall(MemoryMeter& meter);
  ~MeterInstall();
  MeterInstall(const MeterInstall&) = delete;
  MeterInstall& operator=(const MeterInstall&) = delete;

 private:
  std::shared_ptr<MemoryMeter::State> previous_;
};

/// RAII form of begin_scope/end_scope. `close()` returns the scope peak.
class MeterScope {
 public:
  MeterScope(MemoryMeter& meter, std::string label);
  ~MeterScope();
  MeterScope(const MeterScope&) = delete;
  MeterScope& operator=(const MeterScope&) = delete;

  std::size_t close();

 private:
  MemoryMeter* meter_;
  std::size_t id_;
  bool open_ = true;
};

// Owning array of doubles that reports its size to the meter that was
// active when it was allocated.
class Buffer {
 public:
  Buffer() = default;
  explicit Buffer(std::size_t count, double fill = 0.0);
  ~Buffer();

  Buffer(Buffer&& other) noexcept;
  Buffer& operator=(Buffer&& other) noexcept;
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;

  Buffer clone() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::size_t size() const { return data_.size(); }
  std::size_t bytes() const { return data_.size() * sizeof(double); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::vector<double>::iterator begin() { return data_.begin(); }
  std::vector<double>::iterator end() { return data_.end(); }
  std::vector<double>::const_iterator begin() const { return data_.begin(); }
  std::vector<double>::const_iterator end() const { return data_.end(); }

 private:
  void release();

  std::vector<double> data_;
  std::shared_ptr<MemoryMeter::State> meter_;
};

}  // namespace rcbm
