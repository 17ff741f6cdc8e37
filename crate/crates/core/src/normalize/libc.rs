/// Common libc exports recognised as call targets when no list is supplied.
pub const DEFAULT_LIBC_NAMES: &[&str] = &[
    "abort",
    "abs",
    "accept",
    "access",
    "alarm",
    "atexit",
    "atof",
    "atoi",
    "atol",
    "atoll",
    "bind",
    "bsearch",
    "calloc",
    "chdir",
    "chmod",
    "chown",
    "clock",
    "clock_gettime",
    "close",
    "closedir",
    "connect",
    "ctime",
    "dup",
    "dup2",
    "execl",
    "execv",
    "execve",
    "execvp",
    "exit",
    "_exit",
    "fclose",
    "fcntl",
    "fdopen",
    "feof",
    "ferror",
    "fflush",
    "fgetc",
    "fgets",
    "fileno",
    "fopen",
    "fork",
    "fprintf",
    "fputc",
    "fputs",
    "fread",
    "free",
    "freopen",
    "fscanf",
    "fseek",
    "fstat",
    "ftell",
    "fwrite",
    "getc",
    "getchar",
    "getcwd",
    "getenv",
    "getopt",
    "getopt_long",
    "getpid",
    "getppid",
    "gettimeofday",
    "getuid",
    "gmtime",
    "htonl",
    "htons",
    "ioctl",
    "isalnum",
    "isalpha",
    "isatty",
    "isdigit",
    "islower",
    "isprint",
    "isspace",
    "isupper",
    "isxdigit",
    "kill",
    "listen",
    "localtime",
    "longjmp",
    "lseek",
    "lstat",
    "malloc",
    "memchr",
    "memcmp",
    "memcpy",
    "memmove",
    "memset",
    "mkdir",
    "mktime",
    "mmap",
    "munmap",
    "nanosleep",
    "ntohl",
    "ntohs",
    "open",
    "opendir",
    "perror",
    "pipe",
    "poll",
    "printf",
    "pthread_create",
    "pthread_join",
    "pthread_mutex_lock",
    "pthread_mutex_unlock",
    "putc",
    "putchar",
    "puts",
    "qsort",
    "raise",
    "rand",
    "read",
    "readdir",
    "readlink",
    "realloc",
    "recv",
    "recvfrom",
    "remove",
    "rename",
    "rewind",
    "rmdir",
    "scanf",
    "select",
    "send",
    "sendto",
    "setenv",
    "setjmp",
    "setlocale",
    "setsockopt",
    "signal",
    "sigaction",
    "sleep",
    "snprintf",
    "socket",
    "sprintf",
    "srand",
    "sscanf",
    "stat",
    "strcat",
    "strchr",
    "strcmp",
    "strcpy",
    "strcspn",
    "strdup",
    "strerror",
    "strftime",
    "strlen",
    "strncat",
    "strncmp",
    "strncpy",
    "strndup",
    "strpbrk",
    "strrchr",
    "strspn",
    "strstr",
    "strtod",
    "strtok",
    "strtol",
    "strtoll",
    "strtoul",
    "strtoull",
    "system",
    "time",
    "tolower",
    "toupper",
    "umask",
    "ungetc",
    "unlink",
    "usleep",
    "vfprintf",
    "vprintf",
    "vsnprintf",
    "vsprintf",
    "wait",
    "waitpid",
    "write",
    "__assert_fail",
    "__cxa_atexit",
    "__errno_location",
    "__libc_start_main",
    "__printf_chk",
    "__fprintf_chk",
    "__sprintf_chk",
    "__snprintf_chk",
    "__memcpy_chk",
    "__memset_chk",
    "__stack_chk_fail",
    "__strcpy_chk",
];
