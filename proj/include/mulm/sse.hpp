#pragma once

#include <functional>
#include <string>
#include <string_view>

namespace mulm {

struct SseEvent {
  std::string event;  // empty when the frame had no "event:" field
  std::string data;   // "data:" lines joined with '\n'
};

/// Incremental text/event-stream framing. Accepts arbitrary chunk
/// boundaries and both LF and CRLF line endings.
class SseParser {
 public:
  using Handler = std::function<void(const SseEvent&)>;
  explicit SseParser(Handler on_event) : on_event_(std::move(on_event)) {}

  void feed(std::string_view chunk);
  /// Dispatches a trailing frame that was not terminated by a blank line.
  void finish();

 private:
  void line(std::string_view l);

  Handler on_event_;
  std::string buffer_;
  SseEvent current_;
  bool has_data_ = false;
};

std::string format_sse(std::string_view event, std::string_view data);

}  // namespace mulm
