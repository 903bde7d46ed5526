#pragma once

#include <stdexcept>
#include <string>

namespace mulm {

// Every failure the library reports derives from Error so callers can catch
// one type at the service boundary and map kinds to exit codes / HTTP status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ContextOverflowError : public Error {
 public:
  using Error::Error;
};

class IncompleteTimelineError : public Error {
 public:
  using Error::Error;
};

class ProvenanceError : public Error {
 public:
  using Error::Error;
};

// Network-level failure talking to the continuator; safe to retry when no
// bytes of the continuation have been delivered yet.
class TransportError : public Error {
 public:
  using Error::Error;
};

// Deadline exceeded; whatever arrived before the deadline is kept.
class TimeoutError : public Error {
 public:
  TimeoutError(const std::string& what, std::string partial)
      : Error(what), partial_(std::move(partial)) {}
  const std::string& partial_text() const noexcept { return partial_; }

 private:
  std::string partial_;
};

// Non-2xx reply from the continuator.
class ProtocolError : public Error {
 public:
  ProtocolError(int status, std::string body)
      : Error("continuator returned HTTP " + std::to_string(status)),
        status_(status),
        body_(std::move(body)) {}
  int status() const noexcept { return status_; }
  const std::string& body() const noexcept { return body_; }

 private:
  int status_;
  std::string body_;
};

}  // namespace mulm
